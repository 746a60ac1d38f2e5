//! Dataset loading (color, depth, tool masks, cameras) and synthetic
//! deformable-scene generation with a ground-truth sidecar.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::gauss::{load_point_cloud, save_point_cloud, Aabb, Gaussian, GaussianCloud};
use crate::img::{
    load_mask_png, load_pfm, load_png16, load_png8_rgb, save_pfm, save_png16, save_png8, Image,
};
use crate::parallel;
use crate::render::render_naive;
use crate::sh::SH_C0;
use crate::{Error, Result};

/// One observed frame: everything the trainer consumes.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub index: usize,
    pub color: Image,
    pub depth: Image,
    pub tool_mask: Image,
    pub camera: Camera,
    /// Normalized time in [0, 1].
    pub t: f64,
}

/// A loaded sequence.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub frames: Vec<FrameRecord>,
    pub depth_scale: f64,
    pub crop: Option<CropRect>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Pixel rectangle removed from every raster at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Extrinsics of one frame as a world-to-camera rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn apply_to(&self, camera: &Camera) -> Camera {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        let t = Vector3::new(self.translation[0], self.translation[1], self.translation[2]);
        camera.clone().with_pose(&r, &t)
    }

    pub fn from_camera(camera: &Camera) -> Pose {
        let r = camera.rotation();
        let t = camera.translation();
        Pose {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [t[0], t[1], t[2]],
        }
    }
}

/// Schema of `cameras.json`: shared intrinsics (with near/far and a default
/// pose), the depth scale, optional per-frame poses, and an optional crop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CamerasFile {
    pub depth_scale: f64,
    pub camera: Camera,
    #[serde(default)]
    pub poses: Vec<Pose>,
    #[serde(default)]
    pub crop: Option<CropRect>,
}

fn frame_name(i: usize) -> String {
    format!("{i:05}.png")
}

fn list_frame_indices(dir: &Path) -> Result<Vec<usize>> {
    let mut indices = Vec::new();
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::file(dir, format!("cannot list: {e}")))?;
    for entry in entries {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".png").or_else(|| name.strip_suffix(".pfm")) {
            if stem.len() == 5 {
                if let Ok(i) = stem.parse::<usize>() {
                    indices.push(i);
                }
            }
        }
    }
    indices.sort_unstable();
    indices.dedup();
    for (want, &got) in indices.iter().enumerate() {
        if want != got {
            return Err(Error::file(
                dir,
                format!("frame indices are not contiguous from 0 (missing {want:05})"),
            ));
        }
    }
    if indices.is_empty() {
        return Err(Error::file(dir, "no frames found"));
    }
    Ok(indices)
}

fn crop_image(img: &Image, rect: &CropRect) -> Result<Image> {
    if rect.x + rect.width > img.width || rect.y + rect.height > img.height {
        return Err(Error::Format(format!(
            "crop {}x{}+{}+{} exceeds image {}x{}",
            rect.width, rect.height, rect.x, rect.y, img.width, img.height
        )));
    }
    Ok(Image::from_fn(rect.height, rect.width, img.channels, |y, x, c| {
        img.get(y + rect.y, x + rect.x, c)
    }))
}

fn crop_camera(camera: &Camera, rect: &CropRect) -> Camera {
    let mut c = camera.clone();
    c.cx -= rect.x as f64;
    c.cy -= rect.y as f64;
    c.width = rect.width;
    c.height = rect.height;
    c
}

fn load_depth(dir: &Path, index: usize, scale: f64) -> Result<Image> {
    let png = dir.join(frame_name(index));
    if png.exists() {
        return load_png16(&png, scale);
    }
    let pfm = dir.join(format!("{index:05}.pfm"));
    if pfm.exists() {
        return load_pfm(&pfm);
    }
    Err(Error::file(&png, "missing depth file (.png or .pfm)"))
}

/// Loads a sequence from `root` with the layout `color/%05d.png`,
/// `depth/%05d.png` (16-bit, scaled) or `.pfm`, `masks/%05d.png`, and
/// `cameras.json`. Frames are ordered by index with t = index/(T-1).
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta_path = root.join("cameras.json");
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::file(&meta_path, e.to_string()))?;
    let meta: CamerasFile = serde_json::from_str(&meta_text)
        .map_err(|e| Error::file(&meta_path, format!("bad cameras.json: {e}")))?;
    meta.camera.validate()?;
    if !(meta.depth_scale > 0.0) {
        return Err(Error::file(&meta_path, "depth_scale must be positive"));
    }

    let indices = list_frame_indices(&root.join("color"))?;
    let count = indices.len();
    if !(meta.poses.is_empty() || meta.poses.len() == 1 || meta.poses.len() == count) {
        return Err(Error::file(
            &meta_path,
            format!("got {} poses for {} frames (want 0, 1, or {})", meta.poses.len(), count, count),
        ));
    }

    let load_frame = |i: usize| -> Result<FrameRecord> {
        let color_path = root.join("color").join(frame_name(i));
        let color = load_png8_rgb(&color_path)?;
        let depth = load_depth(&root.join("depth"), i, meta.depth_scale)?;
        let mask_path = root.join("masks").join(frame_name(i));
        let tool_mask = load_mask_png(&mask_path)?;
        let mut camera = match meta.poses.len() {
            0 => meta.camera.clone(),
            1 => meta.poses[0].apply_to(&meta.camera),
            _ => meta.poses[i].apply_to(&meta.camera),
        };
        for (img, path) in [(&color, &color_path), (&tool_mask, &mask_path)] {
            if img.height != camera.height || img.width != camera.width {
                return Err(Error::file(
                    path,
                    format!(
                        "raster {}x{} does not match camera {}x{}",
                        img.width, img.height, camera.width, camera.height
                    ),
                ));
            }
        }
        if depth.height != camera.height || depth.width != camera.width {
            return Err(Error::file(
                &root.join("depth").join(frame_name(i)),
                "depth raster does not match camera dimensions",
            ));
        }
        let (color, depth, tool_mask) = match &meta.crop {
            Some(rect) => {
                camera = crop_camera(&camera, rect);
                (crop_image(&color, rect)?, crop_image(&depth, rect)?, crop_image(&tool_mask, rect)?)
            }
            None => (color, depth, tool_mask),
        };
        let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
        Ok(FrameRecord { index: i, color, depth, tool_mask, camera, t })
    };
    let frames: Vec<FrameRecord> = parallel::map_range(count, load_frame)
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(Dataset { frames, depth_scale: meta.depth_scale, crop: meta.crop })
}

/// Analytic deformation: global sinusoidal translation plus a localized
/// bulge along z, both vanishing at t = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformProgram {
    pub amplitude: [f64; 3],
    pub frequency: f64,
    pub bulge_amplitude: f64,
    pub bulge_sigma: f64,
    pub bulge_center: [f64; 2],
}

impl DeformProgram {
    pub fn none() -> Self {
        DeformProgram {
            amplitude: [0.0; 3],
            frequency: 1.0,
            bulge_amplitude: 0.0,
            bulge_sigma: 0.3,
            bulge_center: [0.0, 0.0],
        }
    }

    pub fn apply(&self, cloud: &GaussianCloud, t: f64) -> GaussianCloud {
        let phase = (2.0 * std::f64::consts::PI * self.frequency * t).sin();
        let shift = Vector3::new(self.amplitude[0], self.amplitude[1], self.amplitude[2]) * phase;
        let mut out = cloud.clone();
        for g in &mut out.gaussians {
            let dx = g.position.x - self.bulge_center[0];
            let dy = g.position.y - self.bulge_center[1];
            let envelope =
                (-(dx * dx + dy * dy) / (2.0 * self.bulge_sigma * self.bulge_sigma)).exp();
            g.position += shift;
            g.position.z += self.bulge_amplitude * phase * envelope;
        }
        out
    }
}

/// A rectangle sweeping across the image, burned into color as a constant
/// "tool" so the occluded content is truly destroyed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub x0: f64,
    pub y0: f64,
    pub width: usize,
    pub height: usize,
    pub vx: f64,
    pub vy: f64,
    pub color: [f64; 3],
}

impl OccluderSpec {
    /// Binary mask of the box at frame `i`.
    pub fn mask(&self, i: usize, height: usize, width: usize) -> Image {
        let x = (self.x0 + self.vx * i as f64).round() as i64;
        let y = (self.y0 + self.vy * i as f64).round() as i64;
        let mut m = Image::zeros(height, width, 1);
        for yy in y.max(0)..(y + self.height as i64).min(height as i64) {
            for xx in x.max(0)..(x + self.width as i64).min(width as i64) {
                m.set(yy as usize, xx as usize, 0, 1.0);
            }
        }
        m
    }
}

/// Everything needed to synthesize a dataset.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub cloud: GaussianCloud,
    pub program: DeformProgram,
    pub occluder: Option<OccluderSpec>,
    pub frames: usize,
    pub camera: Camera,
    pub depth_scale: f64,
    /// Write depth as float PFM instead of quantized 16-bit PNG.
    pub lossless_depth: bool,
    pub seed: u64,
}

/// Sidecar record describing how a synthetic dataset was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub program: DeformProgram,
    pub occluder: Option<OccluderSpec>,
    pub frames: usize,
    pub seed: u64,
}

pub const SIDECAR_CLOUD: &str = "gt_cloud.bin";
pub const SIDECAR_RECORD: &str = "gt_program.json";

/// Renders the spec frame by frame and writes a loadable dataset plus the
/// ground-truth sidecar.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    if spec.frames == 0 {
        return Err(Error::Config("synthetic dataset needs at least one frame".into()));
    }
    spec.camera.validate()?;
    for sub in ["color", "depth", "masks"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    let meta = CamerasFile {
        depth_scale: spec.depth_scale,
        camera: spec.camera.clone(),
        poses: Vec::new(),
        crop: None,
    };
    let meta_path = out.join("cameras.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::file(&meta_path, e.to_string()))?;

    let (h, w) = (spec.camera.height, spec.camera.width);
    for i in 0..spec.frames {
        let t = if spec.frames > 1 { i as f64 / (spec.frames - 1) as f64 } else { 0.0 };
        let deformed = spec.program.apply(&spec.cloud, t);
        let rendered = render_naive(&deformed, &spec.camera)?;
        let mask = match &spec.occluder {
            Some(occ) => occ.mask(i, h, w),
            None => Image::zeros(h, w, 1),
        };
        let mut color = rendered.color;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x, 0) != 0.0 {
                    for c in 0..3 {
                        color.set(y, x, c, spec.occluder.as_ref().unwrap().color[c]);
                    }
                }
            }
        }
        save_png8(&color, &out.join("color").join(frame_name(i)))?;
        if spec.lossless_depth {
            save_pfm(&rendered.depth, &out.join("depth").join(format!("{i:05}.pfm")))?;
        } else {
            save_png16(&rendered.depth, spec.depth_scale, &out.join("depth").join(frame_name(i)))?;
        }
        save_png8(&mask, &out.join("masks").join(frame_name(i)))?;
    }

    save_point_cloud(&spec.cloud, &out.join(SIDECAR_CLOUD))?;
    let record = SyntheticRecord {
        program: spec.program,
        occluder: spec.occluder,
        frames: spec.frames,
        seed: spec.seed,
    };
    let record_path = out.join(SIDECAR_RECORD);
    std::fs::write(&record_path, serde_json::to_string_pretty(&record).unwrap())
        .map_err(|e| Error::file(&record_path, e.to_string()))?;
    Ok(())
}

/// Reads back the ground truth written by [`generate_synthetic`].
pub fn load_sidecar(root: &Path) -> Result<(GaussianCloud, SyntheticRecord)> {
    let cloud = load_point_cloud(&root.join(SIDECAR_CLOUD))?;
    let path = root.join(SIDECAR_RECORD);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e.to_string()))?;
    let record: SyntheticRecord =
        serde_json::from_str(&text).map_err(|e| Error::file(&path, e.to_string()))?;
    Ok((cloud, record))
}

/// Jittered-grid heightfield of thin Gaussians with a smooth color field:
/// a closed surface a desk-scale reconstruction can actually reach.
pub fn heightfield_cloud(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = StdRng::seed_from_u64(seed);
    let side = (n as f64).sqrt().ceil() as usize;
    let spacing = 1.6 / side as f64;
    let mut gaussians = Vec::with_capacity(n);
    'grid: for gy in 0..side {
        for gx in 0..side {
            if gaussians.len() == n {
                break 'grid;
            }
            let x = -0.8 + (gx as f64 + 0.5) * spacing + rng.gen_range(-0.2..0.2) * spacing;
            let y = -0.8 + (gy as f64 + 0.5) * spacing + rng.gen_range(-0.2..0.2) * spacing;
            let z = 2.0 + 0.12 * (2.4 * x).sin() * (1.9 * y).cos() + rng.gen_range(-0.01..0.01);
            let color = [
                0.45 + 0.30 * (1.7 * x + 0.5).sin(),
                0.50 + 0.25 * (1.3 * y).cos(),
                0.45 + 0.20 * (x + y).sin(),
            ];
            let dc = color.map(|c| (c - 0.5) / SH_C0);
            gaussians.push(Gaussian {
                position: Vector3::new(x, y, z),
                log_scale: Vector3::new(
                    (spacing * rng.gen_range(0.8..1.1)).ln(),
                    (spacing * rng.gen_range(0.8..1.1)).ln(),
                    (spacing * 0.25).ln(),
                ),
                rotation: Vector4::new(
                    1.0,
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                ),
                sh: vec![dc],
                opacity_logit: rng.gen_range(2.5..3.5),
            });
        }
    }
    let positions: Vec<Vector3<f64>> = gaussians.iter().map(|g| g.position).collect();
    let aabb = Aabb::of_points(&positions).unwrap().expanded(0.3);
    GaussianCloud { gaussians, scene_aabb: aabb }
}

/// Writable path helper used by tests and the command-line tools.
pub fn dataset_paths(root: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        root.join("color").join(frame_name(index)),
        root.join("depth").join(frame_name(index)),
        root.join("masks").join(frame_name(index)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::test_camera;

    fn small_spec(frames: usize, occluder: bool, amplitude: f64) -> SyntheticSpec {
        let camera = test_camera(32);
        SyntheticSpec {
            cloud: heightfield_cloud(60, 9),
            program: DeformProgram {
                amplitude: [amplitude, 0.0, amplitude * 0.5],
                frequency: 1.0,
                bulge_amplitude: amplitude,
                bulge_sigma: 0.4,
                bulge_center: [0.1, -0.1],
            },
            occluder: occluder.then_some(OccluderSpec {
                x0: 4.0,
                y0: 6.0,
                width: 6,
                height: 5,
                vx: 2.0,
                vy: 1.0,
                color: [0.1, 0.1, 0.1],
            }),
            frames,
            camera,
            depth_scale: 0.001,
            lossless_depth: false,
            seed: 9,
        }
    }

    #[test]
    fn generated_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(3, true, 0.05);
        generate_synthetic(&spec, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(
            ds.frames.iter().map(|f| f.t).collect::<Vec<_>>(),
            vec![0.0, 0.5, 1.0]
        );
        for (i, frame) in ds.frames.iter().enumerate() {
            let deformed = spec.program.apply(&spec.cloud, frame.t);
            let rendered = render_naive(&deformed, &spec.camera).unwrap();
            let occ = spec.occluder.as_ref().unwrap().mask(i, 32, 32);
            assert_eq!(frame.tool_mask.data, occ.data);
            for y in 0..32 {
                for x in 0..32 {
                    let expect_color = if occ.get(y, x, 0) != 0.0 {
                        [0.1, 0.1, 0.1]
                    } else {
                        [
                            rendered.color.get(y, x, 0).clamp(0.0, 1.0),
                            rendered.color.get(y, x, 1).clamp(0.0, 1.0),
                            rendered.color.get(y, x, 2).clamp(0.0, 1.0),
                        ]
                    };
                    for c in 0..3 {
                        assert!(
                            (frame.color.get(y, x, c) - expect_color[c]).abs() <= 0.5 / 255.0 + 1e-12,
                            "frame {i} color off at ({y},{x},{c})"
                        );
                    }
                    let d = rendered.depth.get(y, x, 0);
                    let quantized = (d / spec.depth_scale).round().clamp(0.0, 65535.0)
                        * spec.depth_scale;
                    assert!((frame.depth.get(y, x, 0) - quantized).abs() < 1e-12);
                    assert!((frame.depth.get(y, x, 0) - d).abs() <= spec.depth_scale / 2.0 + 1e-12);
                }
            }
        }
        let (gt_cloud, record) = load_sidecar(dir.path()).unwrap();
        assert_eq!(gt_cloud.len(), spec.cloud.len());
        assert_eq!(record.frames, 3);
        assert_eq!(record.program, spec.program);
    }

    #[test]
    fn zero_amplitude_scene_is_static_outside_occluders() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(3, true, 0.0), dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        for frame in &ds.frames[1..] {
            for y in 0..32 {
                for x in 0..32 {
                    if frame.tool_mask.get(y, x, 0) != 0.0
                        || ds.frames[0].tool_mask.get(y, x, 0) != 0.0
                    {
                        continue;
                    }
                    for c in 0..3 {
                        assert_eq!(frame.color.get(y, x, c), ds.frames[0].color.get(y, x, c));
                    }
                }
            }
        }
    }

    #[test]
    fn program_is_identity_at_time_zero() {
        let spec = small_spec(2, false, 0.2);
        let deformed = spec.program.apply(&spec.cloud, 0.0);
        for (a, b) in spec.cloud.gaussians.iter().zip(&deformed.gaussians) {
            assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn absent_occluder_gives_empty_masks() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(2, false, 0.05), dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        for frame in &ds.frames {
            assert!(frame.tool_mask.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lossless_depth_uses_pfm() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small_spec(2, false, 0.05);
        spec.lossless_depth = true;
        generate_synthetic(&spec, dir.path()).unwrap();
        assert!(dir.path().join("depth/00000.pfm").exists());
        let ds = load_dataset(dir.path()).unwrap();
        let rendered = render_naive(&spec.cloud, &spec.camera).unwrap();
        for (got, want) in ds.frames[0].depth.data.iter().zip(&rendered.depth.data) {
            assert!((got - *want as f32 as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn non_binary_mask_is_rejected_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(2, false, 0.0), dir.path()).unwrap();
        // Overwrite one mask with a gray value.
        let bad = Image::from_fn(32, 32, 1, |_, _, _| 128.0 / 255.0);
        save_png8(&bad, &dir.path().join("masks/00001.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("00001.png"), "error was: {err}");
    }

    #[test]
    fn missing_frame_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(3, false, 0.0), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("color/00001.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("00001"), "error was: {err}");
    }

    #[test]
    fn depth_scale_arithmetic_is_applied() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 4, 1, |_, _, _| 1.0);
        save_png16(&img, 0.001, dir.path().join("d.png").as_path()).unwrap();
        let back = load_png16(dir.path().join("d.png").as_path(), 0.001).unwrap();
        // Stored sample 1000 with scale 0.001 reads back 1.0 world units.
        assert!(back.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn pose_lists_are_validated_and_applied() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(2, false, 0.0), dir.path()).unwrap();
        let meta_path = dir.path().join("cameras.json");
        let mut meta: CamerasFile =
            serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
        // Wrong count: 3 poses for 2 frames.
        let pose = Pose::from_camera(&meta.camera);
        meta.poses = vec![pose; 3];
        std::fs::write(&meta_path, serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        // Per-frame poses: second frame shifted along x.
        let shifted = Pose { translation: [0.3, 0.0, 0.0], ..pose };
        meta.poses = vec![pose, shifted];
        std::fs::write(&meta_path, serde_json::to_string(&meta).unwrap()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.frames[0].camera.translation()[0], 0.0);
        assert_eq!(ds.frames[1].camera.translation()[0], 0.3);
    }

    #[test]
    fn crop_rectangle_trims_rasters_and_camera() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(2, true, 0.0), dir.path()).unwrap();
        let full = load_dataset(dir.path()).unwrap();
        let meta_path = dir.path().join("cameras.json");
        let mut meta: CamerasFile =
            serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
        meta.crop = Some(CropRect { x: 2, y: 4, width: 28, height: 24 });
        std::fs::write(&meta_path, serde_json::to_string(&meta).unwrap()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let f = &ds.frames[0];
        assert_eq!((f.color.height, f.color.width), (24, 28));
        assert_eq!((f.camera.height, f.camera.width), (24, 28));
        assert_eq!(f.camera.cx, full.frames[0].camera.cx - 2.0);
        assert_eq!(f.camera.cy, full.frames[0].camera.cy - 4.0);
        for y in 0..24 {
            for x in 0..28 {
                for c in 0..3 {
                    assert_eq!(
                        f.color.get(y, x, c),
                        full.frames[0].color.get(y + 4, x + 2, c)
                    );
                }
            }
        }
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(3, true, 0.05), dir.path()).unwrap();
        let a = load_dataset(dir.path()).unwrap();
        let b = load_dataset(dir.path()).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.color.data, fb.color.data);
            assert_eq!(fa.depth.data, fb.depth.data);
            assert_eq!(fa.tool_mask.data, fb.tool_mask.data);
            assert_eq!(fa.t, fb.t);
        }
    }

    #[test]
    fn heightfield_cloud_is_plausible_and_seeded() {
        let a = heightfield_cloud(200, 4);
        let b = heightfield_cloud(200, 4);
        assert_eq!(a.len(), 200);
        for (ga, gb) in a.gaussians.iter().zip(&b.gaussians) {
            assert_eq!(ga.position, gb.position);
            assert_eq!(ga.sh, gb.sh);
        }
        let c = heightfield_cloud(200, 5);
        assert_ne!(a.gaussians[0].position, c.gaussians[0].position);
        // Everything sits in front of the camera within the declared bounds.
        for g in &a.gaussians {
            assert!(g.position.z > 1.5 && g.position.z < 2.5);
            assert!(a.scene_aabb.contains(&g.position));
            assert!(g.is_finite());
        }
    }
}
