//! Time-conditioned deformation: six factorized feature planes per
//! resolution level, fused by element-wise products and decoded by a small
//! MLP into per-Gaussian parameter deltas.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::Rng;

use crate::gauss::{Aabb, Gaussian, GaussianCloud};
use crate::parallel;
use crate::{Error, Result};

/// One feature plane with `h` channels on an `n1 x n2` node grid,
/// channel-last storage.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGrid {
    pub n1: usize,
    pub n2: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

/// Continuous grid coordinate split into a base node and a fraction.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GridCoord {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
    /// d(grid coordinate)/d(normalized input); zero when clamped.
    pub dgrid: f64,
}

pub(crate) fn grid_coord(u: f64, n: usize) -> GridCoord {
    if n < 2 {
        return GridCoord { i0: 0, i1: 0, frac: 0.0, dgrid: 0.0 };
    }
    let clamped = u.clamp(0.0, 1.0);
    let g = clamped * (n - 1) as f64;
    let i0 = (g.floor() as usize).min(n - 2);
    GridCoord {
        i0,
        i1: i0 + 1,
        frac: g - i0 as f64,
        dgrid: if u == clamped { (n - 1) as f64 } else { 0.0 },
    }
}

impl PlaneGrid {
    pub fn zeros(n1: usize, n2: usize, h: usize) -> Self {
        PlaneGrid { n1, n2, h, data: vec![0.0; n1 * n2 * h] }
    }

    /// Entries near one, so six-way feature products start well scaled.
    pub fn random(n1: usize, n2: usize, h: usize, rng: &mut impl Rng) -> Self {
        let data = (0..n1 * n2 * h).map(|_| rng.gen_range(0.9..1.1)).collect();
        PlaneGrid { n1, n2, h, data }
    }

    #[inline]
    pub fn idx(&self, i1: usize, i2: usize, c: usize) -> usize {
        (i1 * self.n2 + i2) * self.h + c
    }

    /// Bilinear sample at normalized coordinates; exact on grid nodes.
    pub(crate) fn sample_into(&self, a: &GridCoord, b: &GridCoord, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.h);
        let (w00, w10, w01, w11) = corner_weights(a.frac, b.frac);
        let p00 = self.idx(a.i0, b.i0, 0);
        let p10 = self.idx(a.i1, b.i0, 0);
        let p01 = self.idx(a.i0, b.i1, 0);
        let p11 = self.idx(a.i1, b.i1, 0);
        for c in 0..self.h {
            out[c] = w00 * self.data[p00 + c]
                + w10 * self.data[p10 + c]
                + w01 * self.data[p01 + c]
                + w11 * self.data[p11 + c];
        }
    }
}

#[inline]
pub(crate) fn corner_weights(fa: f64, fb: f64) -> (f64, f64, f64, f64) {
    ((1.0 - fa) * (1.0 - fb), fa * (1.0 - fb), (1.0 - fa) * fb, fa * fb)
}

/// The six planes of one resolution level, all sharing the channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct HexLevel {
    pub xy: PlaneGrid,
    pub xz: PlaneGrid,
    pub yz: PlaneGrid,
    pub xt: PlaneGrid,
    pub yt: PlaneGrid,
    pub zt: PlaneGrid,
}

impl HexLevel {
    pub fn planes(&self) -> [&PlaneGrid; 6] {
        [&self.xy, &self.xz, &self.yz, &self.xt, &self.yt, &self.zt]
    }

    pub fn planes_mut(&mut self) -> [&mut PlaneGrid; 6] {
        [
            &mut self.xy,
            &mut self.xz,
            &mut self.yz,
            &mut self.xt,
            &mut self.yt,
            &mut self.zt,
        ]
    }
}

/// Multi-resolution plane stack. Feature dimension is `h * levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct HexPlaneSet {
    pub levels: Vec<HexLevel>,
    pub h: usize,
}

impl HexPlaneSet {
    /// Planes initialized uniformly in [0.9, 1.1), so products across the six
    /// planes start near one instead of collapsing toward zero.
    pub fn new(spatial: &[usize], time: &[usize], h: usize, rng: &mut impl Rng) -> Result<Self> {
        if spatial.len() != time.len() || spatial.is_empty() {
            return Err(Error::Config(format!(
                "plane resolutions must pair up and be non-empty, got {} spatial / {} time",
                spatial.len(),
                time.len()
            )));
        }
        if h == 0 || spatial.iter().chain(time).any(|&n| n == 0) {
            return Err(Error::Config("plane sizes must be positive".into()));
        }
        let levels = spatial
            .iter()
            .zip(time)
            .map(|(&ns, &nt)| HexLevel {
                xy: PlaneGrid::random(ns, ns, h, rng),
                xz: PlaneGrid::random(ns, ns, h, rng),
                yz: PlaneGrid::random(ns, ns, h, rng),
                xt: PlaneGrid::random(ns, nt, h, rng),
                yt: PlaneGrid::random(ns, nt, h, rng),
                zt: PlaneGrid::random(ns, nt, h, rng),
            })
            .collect();
        Ok(HexPlaneSet { levels, h })
    }

    pub fn zeros_like(&self) -> Self {
        let levels = self
            .levels
            .iter()
            .map(|l| HexLevel {
                xy: PlaneGrid::zeros(l.xy.n1, l.xy.n2, self.h),
                xz: PlaneGrid::zeros(l.xz.n1, l.xz.n2, self.h),
                yz: PlaneGrid::zeros(l.yz.n1, l.yz.n2, self.h),
                xt: PlaneGrid::zeros(l.xt.n1, l.xt.n2, self.h),
                yt: PlaneGrid::zeros(l.yt.n1, l.yt.n2, self.h),
                zt: PlaneGrid::zeros(l.zt.n1, l.zt.n2, self.h),
            })
            .collect();
        HexPlaneSet { levels, h: self.h }
    }

    /// All-zero planes of the given shape.
    pub fn zeros(spatial: &[usize], time: &[usize], h: usize) -> Result<Self> {
        if spatial.len() != time.len() || spatial.is_empty() {
            return Err(Error::Config(format!(
                "plane resolutions must pair up and be non-empty, got {} spatial / {} time",
                spatial.len(),
                time.len()
            )));
        }
        let levels = spatial
            .iter()
            .zip(time)
            .map(|(&ns, &nt)| HexLevel {
                xy: PlaneGrid::zeros(ns, ns, h),
                xz: PlaneGrid::zeros(ns, ns, h),
                yz: PlaneGrid::zeros(ns, ns, h),
                xt: PlaneGrid::zeros(ns, nt, h),
                yt: PlaneGrid::zeros(ns, nt, h),
                zt: PlaneGrid::zeros(ns, nt, h),
            })
            .collect();
        Ok(HexPlaneSet { levels, h })
    }

    /// Spatial resolution of each level.
    pub fn spatial_resolutions(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.xy.n1).collect()
    }

    /// Time resolution of each level.
    pub fn time_resolutions(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.xt.n2).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.h * self.levels.len()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.levels
            .iter()
            .flat_map(|l| l.planes().map(|p| p.data.as_slice()))
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.levels
            .iter_mut()
            .flat_map(|l| l.planes_mut().map(|p| p.data.as_mut_slice()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Adds `scale * other` elementwise; shapes must match.
    pub fn add_scaled(&mut self, other: &HexPlaneSet, scale: f64) {
        let mut mine = self.slices_mut();
        let theirs = other.slices();
        assert_eq!(mine.len(), theirs.len(), "plane set shape mismatch");
        for (a, b) in mine.iter_mut().zip(theirs) {
            assert_eq!(a.len(), b.len(), "plane shape mismatch");
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// Per-level grid coordinates for one (position, time) query.
pub(crate) struct LevelCoords {
    pub sx: GridCoord,
    pub sy: GridCoord,
    pub sz: GridCoord,
    pub st: GridCoord,
}

impl LevelCoords {
    /// Coordinate pairs in plane order (xy, xz, yz, xt, yt, zt).
    pub fn pairs(&self) -> [(&GridCoord, &GridCoord); 6] {
        [
            (&self.sx, &self.sy),
            (&self.sx, &self.sz),
            (&self.sy, &self.sz),
            (&self.sx, &self.st),
            (&self.sy, &self.st),
            (&self.sz, &self.st),
        ]
    }
}

pub(crate) fn level_coords(
    level: &HexLevel,
    norm: &Vector3<f64>,
    t: f64,
) -> LevelCoords {
    LevelCoords {
        sx: grid_coord(norm.x, level.xy.n1),
        sy: grid_coord(norm.y, level.xy.n2),
        sz: grid_coord(norm.z, level.xz.n2),
        st: grid_coord(t, level.xt.n2),
    }
}

/// Samples all six planes of every level at (position, t) and fuses them by
/// element-wise product; level blocks are concatenated.
pub fn query_planes(
    planes: &HexPlaneSet,
    position: &Vector3<f64>,
    t: f64,
    aabb: &Aabb,
) -> Vec<f64> {
    let norm = aabb.normalize(position);
    let t = t.clamp(0.0, 1.0);
    let h = planes.h;
    let mut feature = Vec::with_capacity(planes.feature_dim());
    let mut buf = vec![0.0; h];
    for level in &planes.levels {
        let coords = level_coords(level, &norm, t);
        let mut prod = vec![1.0; h];
        for (plane, (a, b)) in level.planes().iter().zip(coords.pairs()) {
            plane.sample_into(a, b, &mut buf);
            for c in 0..h {
                prod[c] *= buf[c];
            }
        }
        feature.extend_from_slice(&prod);
    }
    feature
}

/// One fully-connected layer, row-major weights (out x in).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer { in_dim, out_dim, w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim] }
    }

    pub fn random(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        DenseLayer {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
            b: (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

/// ReLU MLP decoding fused plane features into parameter deltas. The final
/// layer starts at exactly zero so the initial deformation is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformMLP {
    pub layers: Vec<DenseLayer>,
}

impl DeformMLP {
    pub fn new(in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for &width in hidden {
            layers.push(DenseLayer::random(prev, width, rng));
            prev = width;
        }
        layers.push(DenseLayer::zeros(prev, out_dim));
        DeformMLP { layers }
    }

    /// All-zero weights of the given shape.
    pub fn zeros(in_dim: usize, hidden: &[usize], out_dim: usize) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for &width in hidden {
            layers.push(DenseLayer::zeros(prev, width));
            prev = width;
        }
        layers.push(DenseLayer::zeros(prev, out_dim));
        DeformMLP { layers }
    }

    /// Widths of the hidden layers.
    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len().saturating_sub(1)].iter().map(|l| l.out_dim).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn zeros_like(&self) -> Self {
        DeformMLP {
            layers: self.layers.iter().map(|l| DenseLayer::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn add_scaled(&mut self, other: &DeformMLP, scale: f64) {
        let mut mine = self.slices_mut();
        let theirs = other.slices();
        assert_eq!(mine.len(), theirs.len(), "mlp shape mismatch");
        for (a, b) in mine.iter_mut().zip(theirs) {
            assert_eq!(a.len(), b.len(), "mlp layer shape mismatch");
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    /// Forward pass with ReLU between layers, linear output.
    pub fn forward(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature dim {} does not match MLP input {}",
                feature.len(),
                self.in_dim()
            )));
        }
        let mut x = feature.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            layer.forward(&x, &mut next);
            if li != last {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            std::mem::swap(&mut x, &mut next);
        }
        Ok(x)
    }
}

/// Additive per-Gaussian parameter offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationDelta {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub sh: Vec<[f64; 3]>,
    pub opacity_logit: f64,
}

/// Number of MLP outputs for `k` SH coefficient triples: position(3),
/// log_scale(3), rotation(4), sh(3k), opacity(1).
pub fn delta_dim(k: usize) -> usize {
    11 + 3 * k
}

/// Splits a raw MLP output vector into a [`DeformationDelta`].
pub fn decode_deformation(mlp: &DeformMLP, feature: &[f64]) -> Result<DeformationDelta> {
    let out = mlp.forward(feature)?;
    split_delta(&out)
}

pub(crate) fn split_delta(out: &[f64]) -> Result<DeformationDelta> {
    if out.len() < 11 || (out.len() - 11) % 3 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "delta vector of length {} does not split into parameter blocks",
            out.len()
        )));
    }
    let k = (out.len() - 11) / 3;
    let sh = (0..k)
        .map(|i| [out[10 + 3 * i], out[11 + 3 * i], out[12 + 3 * i]])
        .collect();
    Ok(DeformationDelta {
        position: Vector3::new(out[0], out[1], out[2]),
        log_scale: Vector3::new(out[3], out[4], out[5]),
        rotation: Vector4::new(out[6], out[7], out[8], out[9]),
        sh,
        opacity_logit: out[10 + 3 * k],
    })
}

/// Applies the deformation field at time `t`, returning a new cloud. Offsets
/// are added in parameter space; the quaternion sum is stored as-is and
/// normalized at use sites, which keeps the zero-delta case bit-identical to
/// the canonical cloud.
pub fn deform_cloud(
    cloud: &GaussianCloud,
    planes: &HexPlaneSet,
    mlp: &DeformMLP,
    t: f64,
) -> Result<GaussianCloud> {
    let expected = planes.feature_dim();
    if mlp.in_dim() != expected {
        return Err(Error::ShapeMismatch(format!(
            "MLP input {} does not match plane feature dim {expected}",
            mlp.in_dim()
        )));
    }
    let aabb = cloud.scene_aabb;
    let deformed = parallel::map_slice(&cloud.gaussians, |g| -> Result<Gaussian> {
        if mlp.out_dim() != delta_dim(g.sh.len()) {
            return Err(Error::ShapeMismatch(format!(
                "MLP output {} does not match delta dim {} for k = {}",
                mlp.out_dim(),
                delta_dim(g.sh.len()),
                g.sh.len()
            )));
        }
        let feature = query_planes(planes, &g.position, t, &aabb);
        let delta = decode_deformation(mlp, &feature)?;
        let mut sh = g.sh.clone();
        for (s, d) in sh.iter_mut().zip(&delta.sh) {
            for ch in 0..3 {
                s[ch] += d[ch];
            }
        }
        Ok(Gaussian {
            position: g.position + delta.position,
            log_scale: g.log_scale + delta.log_scale,
            rotation: g.rotation + delta.rotation,
            sh,
            opacity_logit: g.opacity_logit + delta.opacity_logit,
        })
    });
    let mut gaussians = Vec::with_capacity(deformed.len());
    for g in deformed {
        gaussians.push(g?);
    }
    Ok(GaussianCloud { gaussians, scene_aabb: aabb })
}

const FIELD_MAGIC: &str = "dsplat-field 1";

/// Writes planes and MLP to the interchange field format: a text header
/// followed by raw little-endian f32 tensors in declaration order.
pub fn save_field(planes: &HexPlaneSet, mlp: &DeformMLP, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{FIELD_MAGIC}")?;
    writeln!(f, "levels {}", planes.levels.len())?;
    writeln!(f, "h {}", planes.h)?;
    write!(f, "spatial")?;
    for l in &planes.levels {
        write!(f, " {}", l.xy.n1)?;
    }
    writeln!(f)?;
    write!(f, "time")?;
    for l in &planes.levels {
        write!(f, " {}", l.xt.n2)?;
    }
    writeln!(f)?;
    write!(f, "mlp {}", mlp.in_dim())?;
    for l in &mlp.layers {
        write!(f, " {}", l.out_dim)?;
    }
    writeln!(f)?;
    writeln!(f, "end_header")?;
    let mut write_tensor = |vals: &[f64]| -> Result<()> {
        let mut bytes = Vec::with_capacity(vals.len() * 4);
        for &v in vals {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        f.write_all(&bytes)?;
        Ok(())
    };
    for s in planes.slices() {
        write_tensor(s)?;
    }
    for s in mlp.slices() {
        write_tensor(s)?;
    }
    Ok(())
}

/// Reads the interchange field format written by [`save_field`].
pub fn load_field(path: &Path) -> Result<(HexPlaneSet, DeformMLP)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    let mut read_line = |r: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::file(path, "truncated header"));
        }
        Ok(line.trim().to_string())
    };
    if read_line(&mut r)? != FIELD_MAGIC {
        return Err(Error::file(path, "not a dsplat field file"));
    }
    let mut levels = None;
    let mut h = None;
    let mut spatial: Vec<usize> = Vec::new();
    let mut time: Vec<usize> = Vec::new();
    let mut mlp_dims: Vec<usize> = Vec::new();
    loop {
        let l = read_line(&mut r)?;
        if l == "end_header" {
            break;
        }
        let mut it = l.split_whitespace();
        let key = it.next().unwrap_or("");
        let vals: Vec<usize> = it.map(|t| t.parse()).collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::file(path, format!("bad header line: {l}")))?;
        match key {
            "levels" if vals.len() == 1 => levels = Some(vals[0]),
            "h" if vals.len() == 1 => h = Some(vals[0]),
            "spatial" => spatial = vals,
            "time" => time = vals,
            "mlp" => mlp_dims = vals,
            _ => return Err(Error::file(path, format!("unknown header line: {l}"))),
        }
    }
    let levels = levels.ok_or_else(|| Error::file(path, "missing levels"))?;
    let h = h.ok_or_else(|| Error::file(path, "missing h"))?;
    if spatial.len() != levels || time.len() != levels || mlp_dims.len() < 2 {
        return Err(Error::file(path, "inconsistent header dimensions"));
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let mut offset = 0usize;
    let mut take = |count: usize| -> Result<Vec<f64>> {
        let bytes = count * 4;
        if offset + bytes > raw.len() {
            return Err(Error::file(path, "truncated tensor data"));
        }
        let vals = raw[offset..offset + bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        offset += bytes;
        Ok(vals)
    };
    let mut level_list = Vec::with_capacity(levels);
    for li in 0..levels {
        let (ns, nt) = (spatial[li], time[li]);
        let plane = |n1: usize, n2: usize, take: &mut dyn FnMut(usize) -> Result<Vec<f64>>| {
            Ok::<_, Error>(PlaneGrid { n1, n2, h, data: take(n1 * n2 * h)? })
        };
        level_list.push(HexLevel {
            xy: plane(ns, ns, &mut take)?,
            xz: plane(ns, ns, &mut take)?,
            yz: plane(ns, ns, &mut take)?,
            xt: plane(ns, nt, &mut take)?,
            yt: plane(ns, nt, &mut take)?,
            zt: plane(ns, nt, &mut take)?,
        });
    }
    let planes = HexPlaneSet { levels: level_list, h };
    let mut layers = Vec::with_capacity(mlp_dims.len() - 1);
    for win in mlp_dims.windows(2) {
        let (in_dim, out_dim) = (win[0], win[1]);
        let w = take(in_dim * out_dim)?;
        let b = take(out_dim)?;
        layers.push(DenseLayer { in_dim, out_dim, w, b });
    }
    if offset != raw.len() {
        return Err(Error::file(path, "trailing bytes after tensors"));
    }
    Ok((planes, DeformMLP { layers }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render, RenderSettings};
    use crate::testutil::{random_cloud, test_camera};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn unit_aabb() -> Aabb {
        Aabb::new(Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0))
    }

    fn small_planes(rng: &mut StdRng) -> HexPlaneSet {
        HexPlaneSet::new(&[4, 8], &[3, 5], 4, rng).unwrap()
    }

    #[test]
    fn zero_plane_annihilates_its_level() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut planes = small_planes(&mut rng);
        planes.levels[0].xy.data.iter_mut().for_each(|v| *v = 0.0);
        let f = query_planes(&planes, &Vector3::new(0.3, 0.6, 0.2), 0.4, &unit_aabb());
        assert!(f[..4].iter().all(|&v| v == 0.0));
        assert!(f[4..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn one_hot_node_gives_sixth_power() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut planes = HexPlaneSet::new(&[4], &[3], 2, &mut rng).unwrap();
        let v = 1.3f64;
        for plane in planes.levels[0].planes_mut() {
            plane.data.iter_mut().for_each(|x| *x = 0.0);
            for c in 0..2 {
                let i = plane.idx(0, 0, c);
                plane.data[i] = v;
            }
        }
        // Query at the (0,0,0,0) corner node on every plane.
        let f = query_planes(&planes, &Vector3::zeros(), 0.0, &unit_aabb());
        for c in 0..2 {
            assert!((f[c] - v.powi(6)).abs() < 1e-12, "{} vs {}", f[c], v.powi(6));
        }
    }

    #[test]
    fn cell_center_matches_corner_average_product() {
        // With 2-node grids, the center of the single cell averages all four
        // corners of every plane.
        let mut rng = StdRng::seed_from_u64(3);
        let planes = HexPlaneSet::new(&[2], &[2], 3, &mut rng).unwrap();
        let f = query_planes(&planes, &Vector3::new(0.5, 0.5, 0.5), 0.5, &unit_aabb());
        for c in 0..3 {
            let mut expect = 1.0;
            for plane in planes.levels[0].planes() {
                let avg = (plane.data[plane.idx(0, 0, c)]
                    + plane.data[plane.idx(1, 0, c)]
                    + plane.data[plane.idx(0, 1, c)]
                    + plane.data[plane.idx(1, 1, c)])
                    / 4.0;
                expect *= avg;
            }
            assert!((f[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_is_node_exact_and_axis_linear() {
        let mut rng = StdRng::seed_from_u64(4);
        let plane = PlaneGrid::random(5, 4, 3, &mut rng);
        // Node exactness at every grid node.
        for i in 0..5 {
            for j in 0..4 {
                let a = grid_coord(i as f64 / 4.0, 5);
                let b = grid_coord(j as f64 / 3.0, 4);
                let mut out = vec![0.0; 3];
                plane.sample_into(&a, &b, &mut out);
                for c in 0..3 {
                    assert_eq!(out[c], plane.data[plane.idx(i, j, c)]);
                }
            }
        }
        // Midpoint along axis 1 with axis 2 on a node: average of two nodes.
        let a = grid_coord(0.125, 5); // halfway between nodes 0 and 1
        let b = grid_coord(2.0 / 3.0, 4); // exactly node 2
        let mut out = vec![0.0; 3];
        plane.sample_into(&a, &b, &mut out);
        for c in 0..3 {
            let expect = 0.5 * (plane.data[plane.idx(0, 2, c)] + plane.data[plane.idx(1, 2, c)]);
            assert!((out[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn query_is_continuous_in_position() {
        let mut rng = StdRng::seed_from_u64(5);
        let planes = small_planes(&mut rng);
        let p = Vector3::new(0.37, 0.52, 0.71);
        let base = query_planes(&planes, &p, 0.3, &unit_aabb());
        let eps = 1e-6;
        let moved = query_planes(&planes, &(p + Vector3::new(eps, 0.0, 0.0)), 0.3, &unit_aabb());
        let max_delta = base
            .iter()
            .zip(&moved)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // Bound: value range 0.1, grid scale (n-1) <= 7, six factors.
        assert!(max_delta < eps * 10.0, "jump of {max_delta} for step {eps}");
    }

    #[test]
    fn zero_head_mlp_gives_zero_delta() {
        let mut rng = StdRng::seed_from_u64(6);
        let mlp = DeformMLP::new(8, &[16, 16], delta_dim(1), &mut rng);
        let feature: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let delta = decode_deformation(&mlp, &feature).unwrap();
        assert_eq!(delta.position, Vector3::zeros());
        assert_eq!(delta.log_scale, Vector3::zeros());
        assert_eq!(delta.rotation, Vector4::zeros());
        assert_eq!(delta.sh, vec![[0.0; 3]]);
        assert_eq!(delta.opacity_logit, 0.0);
    }

    #[test]
    fn constructed_single_layer_maps_feature_to_delta() {
        let mut layer = DenseLayer::zeros(4, delta_dim(1));
        layer.w[0] = 1.0; // d_position.x = feature[0]
        let mlp = DeformMLP { layers: vec![layer] };
        let delta = decode_deformation(&mlp, &[0.7, 0.1, 0.2, 0.3]).unwrap();
        assert_eq!(delta.position, Vector3::new(0.7, 0.0, 0.0));
        assert_eq!(delta.opacity_logit, 0.0);
    }

    #[test]
    fn mlp_forward_matches_reference_loops() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut mlp = DeformMLP::new(6, &[10], 5, &mut rng);
        // Give the head nonzero weights for this check.
        mlp.layers.last_mut().unwrap().w.iter_mut().enumerate().for_each(|(i, w)| {
            *w = (i as f64 * 0.37).sin() * 0.2;
        });
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.9).cos()).collect();
        let got = mlp.forward(&x).unwrap();
        // Independent reference evaluation.
        let l0 = &mlp.layers[0];
        let mut hidden = vec![0.0; 10];
        for o in 0..10 {
            let mut acc = l0.b[o];
            for i in 0..6 {
                acc += l0.w[o * 6 + i] * x[i];
            }
            hidden[o] = acc.max(0.0);
        }
        let l1 = &mlp.layers[1];
        for o in 0..5 {
            let mut acc = l1.b[o];
            for i in 0..10 {
                acc += l1.w[o * 10 + i] * hidden[i];
            }
            assert!((got[o] - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn mlp_rejects_wrong_feature_dim() {
        let mut rng = StdRng::seed_from_u64(8);
        let mlp = DeformMLP::new(8, &[4], 5, &mut rng);
        assert!(matches!(mlp.forward(&[0.0; 5]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn identity_deformation_renders_bit_identically() {
        let mut rng = StdRng::seed_from_u64(9);
        let cloud = random_cloud(&mut rng, 40, 1);
        let planes = HexPlaneSet::new(&[8, 16], &[4, 8], 4, &mut rng).unwrap();
        let mlp = DeformMLP::new(planes.feature_dim(), &[16, 16], delta_dim(4), &mut rng);
        let camera = test_camera(48);
        let base = render(&cloud, &camera, &RenderSettings::default()).unwrap();
        for t in [0.0, 0.13, 0.5, 0.77, 1.0] {
            let deformed = deform_cloud(&cloud, &planes, &mlp, t).unwrap();
            let out = render(&deformed, &camera, &RenderSettings::default()).unwrap();
            assert_eq!(out.color.data, base.color.data, "t = {t}");
            assert_eq!(out.depth.data, base.depth.data);
            assert_eq!(out.alpha.data, base.alpha.data);
        }
    }

    #[test]
    fn constant_translation_matches_shifted_cloud() {
        let mut rng = StdRng::seed_from_u64(10);
        let cloud = random_cloud(&mut rng, 25, 1);
        let planes = {
            // All-ones planes make every feature exactly 1.
            let mut p = HexPlaneSet::new(&[4], &[3], 4, &mut rng).unwrap();
            for plane in p.levels[0].planes_mut() {
                plane.data.iter_mut().for_each(|v| *v = 1.0);
            }
            p
        };
        let mut head = DenseLayer::zeros(4, delta_dim(4));
        head.b[0] = 1.0; // constant d_position = (1, 0, 0)
        let mlp = DeformMLP { layers: vec![head] };
        let deformed = deform_cloud(&cloud, &planes, &mlp, 0.5).unwrap();
        let mut shifted = cloud.clone();
        for g in &mut shifted.gaussians {
            g.position.x += 1.0;
        }
        let camera = test_camera(48);
        let a = render(&deformed, &camera, &RenderSettings::default()).unwrap();
        let b = render(&shifted, &camera, &RenderSettings::default()).unwrap();
        assert_eq!(a.color.data, b.color.data);
    }

    #[test]
    fn random_deltas_apply_additively() {
        let mut rng = StdRng::seed_from_u64(11);
        let cloud = random_cloud(&mut rng, 10, 1);
        let planes = small_planes(&mut rng);
        let mut mlp = DeformMLP::new(planes.feature_dim(), &[12], delta_dim(4), &mut rng);
        for w in mlp.layers.last_mut().unwrap().w.iter_mut() {
            *w = rng.gen_range(-0.01..0.01);
        }
        let t = 0.4;
        let deformed = deform_cloud(&cloud, &planes, &mlp, t).unwrap();
        for (g, d) in cloud.gaussians.iter().zip(&deformed.gaussians) {
            let feature = query_planes(&planes, &g.position, t, &cloud.scene_aabb);
            let delta = decode_deformation(&mlp, &feature).unwrap();
            assert!((d.position - (g.position + delta.position)).norm() < 1e-12);
            assert!((d.log_scale - (g.log_scale + delta.log_scale)).norm() < 1e-12);
            assert!((d.rotation - (g.rotation + delta.rotation)).norm() < 1e-12);
            assert!((d.opacity_logit - (g.opacity_logit + delta.opacity_logit)).abs() < 1e-12);
            for (a, (b, dd)) in d.sh.iter().zip(g.sh.iter().zip(&delta.sh)) {
                for ch in 0..3 {
                    assert!((a[ch] - (b[ch] + dd[ch])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn field_file_round_trip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(12);
        let planes = small_planes(&mut rng);
        let mlp = DeformMLP::new(planes.feature_dim(), &[16, 16], delta_dim(4), &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.field");
        let p2 = dir.path().join("b.field");
        save_field(&planes, &mlp, &p1).unwrap();
        let (lp, lm) = load_field(&p1).unwrap();
        assert_eq!(lp.feature_dim(), planes.feature_dim());
        assert_eq!(lm.out_dim(), mlp.out_dim());
        save_field(&lp, &lm, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
