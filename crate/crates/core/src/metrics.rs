//! Masked image-quality metrics and rendering-throughput measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::deform::{deform_cloud, DeformMLP, HexPlaneSet};
use crate::gauss::GaussianCloud;
use crate::img::Image;
use crate::render::{render, RenderSettings};
use crate::{Error, Result};

/// Reported in place of infinity when the masked MSE is zero.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_mask(img: &Image, mask: &Image) -> Result<()> {
    if mask.channels != 1 || mask.height != img.height || mask.width != img.width {
        return Err(Error::ShapeMismatch("tool mask does not match image shape".into()));
    }
    if mask.data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Format("tool mask contains non-binary values".into()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over non-tool pixels, for images in [0, 1].
/// Zero error reports the cap value instead of infinity.
pub fn masked_psnr(gt: &Image, pred: &Image, tool_mask: &Image) -> Result<f64> {
    gt.require_shape(pred, "prediction")?;
    check_mask(gt, tool_mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..gt.height {
        for x in 0..gt.width {
            if tool_mask.get(y, x, 0) != 0.0 {
                continue;
            }
            for c in 0..gt.channels {
                let d = gt.get(y, x, c) - pred.get(y, x, c);
                sum += d * d;
            }
            count += gt.channels;
        }
    }
    if count == 0 {
        return Err(Error::EmptySampleSet);
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable valid-mode Gaussian filter; output is (h-10) x (w-10).
fn valid_filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * plane[y * w + x + i];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window, averaged per channel
/// over windows that contain no tool pixel.
pub fn masked_ssim(gt: &Image, pred: &Image, tool_mask: &Image) -> Result<f64> {
    gt.require_shape(pred, "prediction")?;
    check_mask(gt, tool_mask)?;
    let (h, w) = (gt.height, gt.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::EmptySampleSet);
    }
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);

    // Integral image of the mask marks windows touching any tool pixel.
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] = tool_mask.get(y, x, 0)
                + integral[y * (w + 1) + x + 1]
                + integral[(y + 1) * (w + 1) + x]
                - integral[y * (w + 1) + x];
        }
    }
    let window_clean = |y: usize, x: usize| -> bool {
        let (y1, x1) = (y + SSIM_WINDOW, x + SSIM_WINDOW);
        let s = integral[y1 * (w + 1) + x1] - integral[y * (w + 1) + x1]
            - integral[y1 * (w + 1) + x]
            + integral[y * (w + 1) + x];
        s == 0.0
    };

    let kernel = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..gt.channels {
        let a: Vec<f64> = (0..h * w)
            .map(|i| gt.data[i * gt.channels + c])
            .collect();
        let b: Vec<f64> = (0..h * w)
            .map(|i| pred.data[i * pred.channels + c])
            .collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let mu_a = valid_filter(&a, h, w, &kernel);
        let mu_b = valid_filter(&b, h, w, &kernel);
        let m_aa = valid_filter(&aa, h, w, &kernel);
        let m_bb = valid_filter(&bb, h, w, &kernel);
        let m_ab = valid_filter(&ab, h, w, &kernel);
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 0..oh {
            for x in 0..ow {
                if !window_clean(y, x) {
                    continue;
                }
                let i = y * ow + x;
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = m_aa[i] - ma * ma;
                let vb = m_bb[i] - mb * mb;
                let cov = m_ab[i] - ma * mb;
                sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptySampleSet);
        }
        total += sum / count as f64;
    }
    Ok(total / gt.channels as f64)
}

/// Throughput of one timed render pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub fps: f64,
    pub median_seconds: f64,
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
}

/// Median wall-clock rendering rate over `n_timed` frames after `n_warmup`
/// discarded frames, cycling through the given views. When a deformation
/// field is supplied, per-frame deformation is included in the timing.
pub fn measure_fps(
    cloud: &GaussianCloud,
    field: Option<(&HexPlaneSet, &DeformMLP)>,
    views: &[(Camera, f64)],
    settings: &RenderSettings,
    n_warmup: usize,
    n_timed: usize,
) -> Result<FpsReport> {
    if n_timed < 10 {
        return Err(Error::Config(format!("need at least 10 timed frames, got {n_timed}")));
    }
    let first = views.first().ok_or(Error::EmptySampleSet)?;
    let render_one = |view: &(Camera, f64)| -> Result<()> {
        match field {
            Some((planes, mlp)) => {
                let deformed = deform_cloud(cloud, planes, mlp, view.1)?;
                render(&deformed, &view.0, settings)?;
            }
            None => {
                render(cloud, &view.0, settings)?;
            }
        }
        Ok(())
    };
    for i in 0..n_warmup {
        render_one(&views[i % views.len()])?;
    }
    let mut times = Vec::with_capacity(n_timed);
    for i in 0..n_timed {
        let start = Instant::now();
        render_one(&views[i % views.len()])?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if n_timed % 2 == 1 {
        times[n_timed / 2]
    } else {
        0.5 * (times[n_timed / 2 - 1] + times[n_timed / 2])
    };
    Ok(FpsReport {
        fps: 1.0 / median.max(1e-12),
        median_seconds: median,
        gaussians: cloud.len(),
        width: first.0.width,
        height: first.0.height,
    })
}

/// Quality metrics of one evaluated frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub excluded_pixels: usize,
    pub total_pixels: usize,
}

/// Per-frame metrics with their means and an optional throughput figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameEval>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub fps: Option<FpsReport>,
}

impl EvalReport {
    pub fn from_frames(frames: Vec<FrameEval>, fps: Option<FpsReport>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptySampleSet);
        }
        let n = frames.len() as f64;
        let mean_psnr = frames.iter().map(|f| f.psnr).sum::<f64>() / n;
        let mean_ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / n;
        Ok(EvalReport { frames, mean_psnr, mean_ssim, fps })
    }
}

/// Evaluates a rendered frame against ground truth under its tool mask.
pub fn eval_frame(
    frame: usize,
    gt: &Image,
    pred: &Image,
    tool_mask: &Image,
) -> Result<FrameEval> {
    Ok(FrameEval {
        frame,
        psnr: masked_psnr(gt, pred, tool_mask)?,
        ssim: masked_ssim(gt, pred, tool_mask)?,
        excluded_pixels: tool_mask.data.iter().filter(|&&v| v != 0.0).count(),
        total_pixels: tool_mask.height * tool_mask.width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_cloud, test_camera};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_pair(rng: &mut StdRng, h: usize, w: usize, c: usize) -> (Image, Image) {
        let gt = Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0));
        let pred = Image::from_fn(h, w, c, |y, x, ch| {
            (gt.get(y, x, ch) + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)
        });
        (gt, pred)
    }

    #[test]
    fn psnr_hand_cases() {
        let gt = Image::from_fn(32, 32, 3, |y, x, c| ((y + x + c) % 7) as f64 / 7.0);
        let mask = Image::zeros(32, 32, 1);
        assert_eq!(masked_psnr(&gt, &gt, &mask).unwrap(), 99.0);
        let shifted = Image::from_fn(32, 32, 3, |y, x, c| gt.get(y, x, c) + 0.1);
        let p = masked_psnr(&gt, &shifted, &mask).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn psnr_ignores_tool_region_errors() {
        let mut rng = StdRng::seed_from_u64(1);
        let gt = Image::from_fn(16, 16, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let mut mask = Image::zeros(16, 16, 1);
        for _ in 0..40 {
            mask.set(rng.gen_range(0..16), rng.gen_range(0..16), 0, 1.0);
        }
        let mut pred = gt.clone();
        for y in 0..16 {
            for x in 0..16 {
                if mask.get(y, x, 0) != 0.0 {
                    for c in 0..3 {
                        pred.set(y, x, c, rng.gen_range(0.0..1.0));
                    }
                }
            }
        }
        assert_eq!(masked_psnr(&gt, &pred, &mask).unwrap(), 99.0);
    }

    #[test]
    fn psnr_is_symmetric_and_validates_masks() {
        let mut rng = StdRng::seed_from_u64(2);
        let (gt, pred) = random_pair(&mut rng, 12, 12, 3);
        let mask = Image::from_fn(12, 12, 1, |_, _, _| if rng.gen_bool(0.2) { 1.0 } else { 0.0 });
        let a = masked_psnr(&gt, &pred, &mask).unwrap();
        let b = masked_psnr(&pred, &gt, &mask).unwrap();
        assert_eq!(a, b);
        let all = Image::from_fn(12, 12, 1, |_, _, _| 1.0);
        assert!(masked_psnr(&gt, &pred, &all).is_err());
        let mut bad = Image::zeros(12, 12, 1);
        bad.set(0, 0, 0, 0.3);
        assert!(masked_psnr(&gt, &pred, &bad).is_err());
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let mut rng = StdRng::seed_from_u64(3);
        let img = Image::from_fn(20, 24, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let mask = Image::zeros(20, 24, 1);
        assert_eq!(masked_ssim(&img, &img, &mask).unwrap(), 1.0);
    }

    #[test]
    fn ssim_penalizes_inversion() {
        let img = Image::from_fn(24, 24, 1, |y, x, _| ((y * 31 + x * 17) % 11) as f64 / 11.0);
        let inv = Image::from_fn(24, 24, 1, |y, x, _| 1.0 - img.get(y, x, 0));
        let mask = Image::zeros(24, 24, 1);
        let s = masked_ssim(&img, &inv, &mask).unwrap();
        assert!(s < 1.0 && s >= -1.0, "ssim {s}");
    }

    /// Direct per-window SSIM with explicit 2D weights, as a reference.
    fn ssim_reference(gt: &Image, pred: &Image, mask: &Image) -> f64 {
        let k = gaussian_kernel();
        let (h, w) = (gt.height, gt.width);
        let mut total = 0.0;
        for c in 0..gt.channels {
            let mut sum = 0.0;
            let mut count = 0usize;
            for y0 in 0..=(h - 11) {
                'win: for x0 in 0..=(w - 11) {
                    for dy in 0..11 {
                        for dx in 0..11 {
                            if mask.get(y0 + dy, x0 + dx, 0) != 0.0 {
                                continue 'win;
                            }
                        }
                    }
                    let (mut ma, mut mb) = (0.0, 0.0);
                    let (mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0);
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let wgt = k[dy] * k[dx];
                            let a = gt.get(y0 + dy, x0 + dx, c);
                            let b = pred.get(y0 + dy, x0 + dx, c);
                            ma += wgt * a;
                            mb += wgt * b;
                            maa += wgt * a * a;
                            mbb += wgt * b * b;
                            mab += wgt * a * b;
                        }
                    }
                    let va = maa - ma * ma;
                    let vb = mbb - mb * mb;
                    let cov = mab - ma * mb;
                    sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
        total / gt.channels as f64
    }

    #[test]
    fn ssim_matches_direct_reference_on_fixed_pair() {
        let mut rng = StdRng::seed_from_u64(4);
        let (gt, pred) = random_pair(&mut rng, 32, 32, 3);
        let clean = Image::zeros(32, 32, 1);
        let got = masked_ssim(&gt, &pred, &clean).unwrap();
        let want = ssim_reference(&gt, &pred, &clean);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        // Same with a scattered tool mask.
        let mut mask = Image::zeros(32, 32, 1);
        for _ in 0..25 {
            mask.set(rng.gen_range(0..32), rng.gen_range(0..32), 0, 1.0);
        }
        let got = masked_ssim(&gt, &pred, &mask).unwrap();
        let want = ssim_reference(&gt, &pred, &mask);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn ssim_ignores_tool_region_errors() {
        let mut rng = StdRng::seed_from_u64(5);
        let (gt, _) = random_pair(&mut rng, 24, 24, 3);
        let mut mask = Image::zeros(24, 24, 1);
        for y in 8..12 {
            for x in 10..14 {
                mask.set(y, x, 0, 1.0);
            }
        }
        let mut pred = gt.clone();
        for y in 8..12 {
            for x in 10..14 {
                for c in 0..3 {
                    pred.set(y, x, c, rng.gen_range(0.0..1.0));
                }
            }
        }
        assert_eq!(masked_ssim(&gt, &pred, &mask).unwrap(), 1.0);
    }

    #[test]
    fn ssim_errors_without_a_clean_window() {
        let mut rng = StdRng::seed_from_u64(6);
        let (gt, pred) = random_pair(&mut rng, 16, 16, 1);
        let all = Image::from_fn(16, 16, 1, |_, _, _| 1.0);
        assert!(masked_ssim(&gt, &pred, &all).is_err());
        // Too small for a single 11x11 window.
        let (sg, sp) = random_pair(&mut rng, 8, 8, 1);
        assert!(masked_ssim(&sg, &sp, &Image::zeros(8, 8, 1)).is_err());
    }

    #[test]
    fn fps_measurement_reports_finite_rates() {
        let mut rng = StdRng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 50, 0);
        let views = vec![(test_camera(32), 0.0)];
        let settings = RenderSettings::default();
        let report = measure_fps(&cloud, None, &views, &settings, 2, 11).unwrap();
        assert!(report.fps.is_finite() && report.fps > 0.0);
        assert_eq!(report.gaussians, 50);
        assert_eq!((report.width, report.height), (32, 32));
        // Zero-Gaussian cloud still renders and reports.
        let empty = GaussianCloud { gaussians: vec![], scene_aabb: cloud.scene_aabb };
        let report = measure_fps(&empty, None, &views, &settings, 0, 10).unwrap();
        assert!(report.fps.is_finite());
        assert!(measure_fps(&cloud, None, &views, &settings, 0, 9).is_err());
    }

    #[test]
    fn report_means_are_frame_averages() {
        let frames = vec![
            FrameEval { frame: 0, psnr: 30.0, ssim: 0.9, excluded_pixels: 0, total_pixels: 64 },
            FrameEval { frame: 1, psnr: 34.0, ssim: 0.7, excluded_pixels: 4, total_pixels: 64 },
        ];
        let report = EvalReport::from_frames(frames, None).unwrap();
        assert_eq!(report.mean_psnr, 32.0);
        assert!((report.mean_ssim - 0.8).abs() < 1e-12);
        assert!(EvalReport::from_frames(vec![], None).is_err());
    }
}
