//! Supervision terms: importance-weighted L1, Huber depth, spatial and
//! temporal total variation, and surface alignment (SDF, normal direction,
//! opacity entropy), each with analytic gradients.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::deform::HexPlaneSet;
use crate::gauss::{
    inverse_covariance, inverse_covariance_backward, normalize_quat, quat_normalize_backward,
    quat_to_rotation, quat_to_rotation_jacobian, GaussianCloud,
};
use crate::img::Image;
use crate::parallel;
use crate::render_grad::GaussianGradients;
use crate::sh::direction_normalize_backward;
use crate::{Error, Result};

/// Density clamp bounds applied before the SDF log.
const DENSITY_FLOOR: f64 = 1e-12;
const DENSITY_CEIL: f64 = 1.0 - 1e-7;
/// Opacity clamp for the entropy term.
const OPACITY_CLAMP: f64 = 1e-7;

/// Scalar weights of the total objective plus the importance scale and the
/// Huber threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_depth: f64,
    pub lambda_tv_spatial: f64,
    pub lambda_tv_temporal: f64,
    pub lambda_surface: f64,
    pub alpha: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_depth: 0.5,
            lambda_tv_spatial: 0.01,
            lambda_tv_temporal: 1.0,
            lambda_surface: 0.2,
            alpha: 30.0,
            delta: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_depth", self.lambda_depth),
            ("lambda_tv_spatial", self.lambda_tv_spatial),
            ("lambda_tv_temporal", self.lambda_tv_temporal),
            ("lambda_surface", self.lambda_surface),
            ("alpha", self.alpha),
            ("delta", self.delta),
        ];
        for (name, value) in named {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Per-frame supervision weights: zero on that frame's tool pixels, above one
/// where other frames' tools frequently occlude the tissue.
pub fn importance_maps(masks: &[Image], alpha: f64) -> Result<Vec<Image>> {
    let first = masks.first().ok_or(Error::EmptySampleSet)?;
    if first.channels != 1 {
        return Err(Error::ShapeMismatch(format!(
            "masks must have one channel, got {}",
            first.channels
        )));
    }
    for m in masks {
        first.require_shape(m, "tool mask")?;
        if m.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Format("tool mask contains non-binary values".into()));
        }
    }
    let mut sum = vec![0.0f64; first.data.len()];
    for m in masks {
        for (s, &v) in sum.iter_mut().zip(&m.data) {
            *s += v;
        }
    }
    let frob = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    let boost: Vec<f64> = if frob > 0.0 {
        sum.iter().map(|v| 1.0 + alpha * v / frob).collect()
    } else {
        vec![1.0; sum.len()]
    };
    Ok(masks
        .iter()
        .map(|m| {
            let mut v = Image::zeros(m.height, m.width, 1);
            for i in 0..v.data.len() {
                v.data[i] = (1.0 - m.data[i]) * boost[i];
            }
            v
        })
        .collect())
}

/// Mean absolute color error with per-pixel importance weights.
pub fn masked_l1(gt: &Image, pred: &Image, weight: &Image) -> Result<f64> {
    Ok(masked_l1_with_grad(gt, pred, weight)?.0)
}

/// Also returns dL/dpred.
pub fn masked_l1_with_grad(gt: &Image, pred: &Image, weight: &Image) -> Result<(f64, Image)> {
    gt.require_shape(pred, "prediction")?;
    if weight.height != gt.height || weight.width != gt.width || weight.channels != 1 {
        return Err(Error::ShapeMismatch(format!(
            "weight map {}x{}x{} does not match image {}x{}",
            weight.height, weight.width, weight.channels, gt.height, gt.width
        )));
    }
    let count = gt.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = Image::zeros(pred.height, pred.width, pred.channels);
    for y in 0..gt.height {
        for x in 0..gt.width {
            let v = weight.get(y, x, 0);
            for c in 0..gt.channels {
                let diff = (gt.get(y, x, c) - pred.get(y, x, c)) * v;
                loss += diff.abs();
                grad.set(y, x, c, -v * diff.signum() / count);
            }
        }
    }
    Ok((loss / count, grad))
}

fn huber(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

fn huber_derivative(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

/// Huber penalty on far-normalized depth over non-tool pixels with valid
/// ground truth (D > 0).
pub fn depth_loss(
    gt: &Image,
    pred: &Image,
    tool_mask: &Image,
    delta: f64,
    far: f64,
) -> Result<f64> {
    Ok(depth_loss_with_grad(gt, pred, tool_mask, delta, far)?.0)
}

/// Also returns dL/dpred.
pub fn depth_loss_with_grad(
    gt: &Image,
    pred: &Image,
    tool_mask: &Image,
    delta: f64,
    far: f64,
) -> Result<(f64, Image)> {
    gt.require_shape(pred, "predicted depth")?;
    if gt.channels != 1 || tool_mask.channels != 1 {
        return Err(Error::ShapeMismatch("depth and mask must be single-channel".into()));
    }
    if tool_mask.height != gt.height || tool_mask.width != gt.width {
        return Err(Error::ShapeMismatch("tool mask does not match depth shape".into()));
    }
    let mut loss = 0.0;
    let mut count = 0usize;
    let mut grad = Image::zeros(pred.height, pred.width, 1);
    let mut terms = Vec::new();
    for y in 0..gt.height {
        for x in 0..gt.width {
            let d = gt.get(y, x, 0);
            if tool_mask.get(y, x, 0) != 0.0 || d <= 0.0 {
                continue;
            }
            let e = (d - pred.get(y, x, 0)) / far;
            loss += huber(e, delta);
            terms.push((y, x, e));
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / count as f64;
    for (y, x, e) in terms {
        grad.set(y, x, 0, -huber_derivative(e, delta) / far * scale);
    }
    Ok((loss * scale, grad))
}

/// Anisotropic total variation restricted to pairs fully inside the tool
/// mask, keeping the inpainted region smooth without penalizing tissue edges.
pub fn spatial_tv(pred: &Image, tool_mask: &Image) -> Result<f64> {
    Ok(spatial_tv_with_grad(pred, tool_mask)?.0)
}

/// Also returns dL/dpred.
pub fn spatial_tv_with_grad(pred: &Image, tool_mask: &Image) -> Result<(f64, Image)> {
    if tool_mask.channels != 1
        || tool_mask.height != pred.height
        || tool_mask.width != pred.width
    {
        return Err(Error::ShapeMismatch("tool mask does not match image shape".into()));
    }
    let mut pairs: Vec<(usize, usize, usize, usize)> = Vec::new();
    for y in 0..pred.height {
        for x in 0..pred.width {
            if tool_mask.get(y, x, 0) == 0.0 {
                continue;
            }
            if x + 1 < pred.width && tool_mask.get(y, x + 1, 0) != 0.0 {
                pairs.push((y, x, y, x + 1));
            }
            if y + 1 < pred.height && tool_mask.get(y + 1, x, 0) != 0.0 {
                pairs.push((y, x, y + 1, x));
            }
        }
    }
    let mut grad = Image::zeros(pred.height, pred.width, pred.channels);
    let count = pairs.len() * pred.channels;
    if count == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for (ya, xa, yb, xb) in pairs {
        for c in 0..pred.channels {
            let d = pred.get(ya, xa, c) - pred.get(yb, xb, c);
            loss += d.abs();
            grad.add(ya, xa, c, d.signum() * scale);
            grad.add(yb, xb, c, -d.signum() * scale);
        }
    }
    Ok((loss * scale, grad))
}

/// Mean squared difference of time-adjacent entries in the three space-time
/// planes of every level.
pub fn temporal_tv(planes: &HexPlaneSet) -> f64 {
    temporal_tv_with_grad(planes).0
}

/// Also returns dL/dplanes (zero on the space-space planes).
pub fn temporal_tv_with_grad(planes: &HexPlaneSet) -> (f64, HexPlaneSet) {
    let mut grads = planes.zeros_like();
    let mut sum = 0.0;
    let mut count = 0usize;
    for level in &planes.levels {
        for plane in [&level.xt, &level.yt, &level.zt] {
            count += plane.n1 * plane.n2.saturating_sub(1) * plane.h;
        }
    }
    if count == 0 {
        return (0.0, grads);
    }
    let scale = 1.0 / count as f64;
    for (li, level) in planes.levels.iter().enumerate() {
        let glevel = &mut grads.levels[li];
        for (plane, gplane) in [
            (&level.xt, &mut glevel.xt),
            (&level.yt, &mut glevel.yt),
            (&level.zt, &mut glevel.zt),
        ] {
            for i1 in 0..plane.n1 {
                for i2 in 0..plane.n2.saturating_sub(1) {
                    for c in 0..plane.h {
                        let a = plane.data[plane.idx(i1, i2, c)];
                        let b = plane.data[plane.idx(i1, i2 + 1, c)];
                        let d = b - a;
                        sum += d * d;
                        let (ia, ib) = (gplane.idx(i1, i2, c), gplane.idx(i1, i2 + 1, c));
                        gplane.data[ib] += 2.0 * d * scale;
                        gplane.data[ia] -= 2.0 * d * scale;
                    }
                }
            }
        }
    }
    (sum * scale, grads)
}

struct CellGrid {
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
    oversized: Vec<u32>,
}

impl CellGrid {
    fn build(positions: &[Vector3<f64>], radii: &[f64]) -> Option<CellGrid> {
        if positions.is_empty() {
            return None;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for (p, &r) in positions.iter().zip(radii) {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k] - r);
                hi[k] = hi[k].max(p[k] + r);
            }
        }
        let span = (hi - lo).max().max(1e-9);
        let cell = span / 32.0;
        let dims = std::array::from_fn(|k| (((hi[k] - lo[k]) / cell).ceil() as usize).clamp(1, 64));
        let mut grid = CellGrid {
            origin: lo,
            cell,
            dims,
            cells: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
            oversized: Vec::new(),
        };
        for (g, (p, &r)) in positions.iter().zip(radii).enumerate() {
            let lo_c: [usize; 3] = std::array::from_fn(|k| grid.axis_cell(p[k] - r, k));
            let hi_c: [usize; 3] = std::array::from_fn(|k| grid.axis_cell(p[k] + r, k));
            let spanned: usize = (0..3).map(|k| hi_c[k] - lo_c[k] + 1).product();
            if spanned > 64 {
                grid.oversized.push(g as u32);
                continue;
            }
            for ix in lo_c[0]..=hi_c[0] {
                for iy in lo_c[1]..=hi_c[1] {
                    for iz in lo_c[2]..=hi_c[2] {
                        let cell = grid.flat(ix, iy, iz);
                        grid.cells[cell].push(g as u32);
                    }
                }
            }
        }
        Some(grid)
    }

    fn axis_cell(&self, x: f64, k: usize) -> usize {
        let i = ((x - self.origin[k]) / self.cell).floor();
        (i.max(0.0) as usize).min(self.dims[k] - 1)
    }

    fn flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    fn cell_of(&self, p: &Vector3<f64>) -> usize {
        let c: [usize; 3] = std::array::from_fn(|k| self.axis_cell(p[k], k));
        self.flat(c[0], c[1], c[2])
    }
}

/// Precomputed per-Gaussian quantities for density queries. With a cutoff,
/// Gaussians beyond that Mahalanobis radius are skipped via a spatial grid;
/// the result is identical to the brute cutoff sum and deterministic.
pub struct DensityCache {
    positions: Vec<Vector3<f64>>,
    inv_cov: Vec<Matrix3<f64>>,
    opacities: Vec<f64>,
    cutoff: Option<f64>,
    grid: Option<CellGrid>,
}

impl DensityCache {
    pub fn new(cloud: &GaussianCloud, cutoff: Option<f64>) -> Self {
        let positions: Vec<Vector3<f64>> =
            cloud.gaussians.iter().map(|g| g.position).collect();
        let inv_cov: Vec<Matrix3<f64>> = parallel::map_slice(&cloud.gaussians, |g| {
            inverse_covariance(&g.log_scale, &g.rotation).0
        });
        let opacities: Vec<f64> = cloud.gaussians.iter().map(|g| g.opacity()).collect();
        let grid = cutoff.and_then(|c| {
            let radii: Vec<f64> = cloud
                .gaussians
                .iter()
                .map(|g| c * g.scale().max())
                .collect();
            CellGrid::build(&positions, &radii)
        });
        DensityCache { positions, inv_cov, opacities, cutoff, grid }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Visits candidate indices in ascending order.
    fn for_candidates(&self, p: &Vector3<f64>, mut f: impl FnMut(usize)) {
        match &self.grid {
            None => {
                for g in 0..self.len() {
                    f(g);
                }
            }
            Some(grid) => {
                let a = &grid.cells[grid.cell_of(p)];
                let b = &grid.oversized;
                let (mut i, mut j) = (0usize, 0usize);
                loop {
                    match (a.get(i), b.get(j)) {
                        (Some(&x), Some(&y)) => {
                            if x <= y {
                                i += 1;
                                f(x as usize);
                            } else {
                                j += 1;
                                f(y as usize);
                            }
                        }
                        (Some(&x), None) => {
                            i += 1;
                            f(x as usize);
                        }
                        (None, Some(&y)) => {
                            j += 1;
                            f(y as usize);
                        }
                        (None, None) => break,
                    }
                }
            }
        }
    }

    /// Total Gaussian density at `p`.
    pub fn density(&self, p: &Vector3<f64>) -> f64 {
        let mut d = 0.0;
        self.for_candidates(p, |g| {
            let r = p - self.positions[g];
            let q = r.dot(&(self.inv_cov[g] * r));
            if self.cutoff.map_or(true, |c| q <= c * c) {
                d += self.opacities[g] * (-0.5 * q).exp();
            }
        });
        d
    }
}

/// Sum of per-Gaussian densities at `p`; `cutoff` in Mahalanobis units,
/// `None` for the exact sum.
pub fn density(p: &Vector3<f64>, cloud: &GaussianCloud, cutoff: Option<f64>) -> f64 {
    DensityCache::new(cloud, cutoff).density(p)
}

/// Index of the Gaussian with minimal Mahalanobis distance to `p`; ties go
/// to the lowest index.
pub fn closest_gaussian(p: &Vector3<f64>, cloud: &GaussianCloud) -> Result<usize> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut best = (f64::INFINITY, 0usize);
    for (g, gauss) in cloud.gaussians.iter().enumerate() {
        let (p_inv, _) = inverse_covariance(&gauss.log_scale, &gauss.rotation);
        let r = p - gauss.position;
        let q = r.dot(&(p_inv * r));
        if q < best.0 {
            best = (q, g);
        }
    }
    Ok(best.1)
}

/// One surface sample with everything needed by the alignment losses.
#[derive(Debug, Clone)]
pub struct SdfSample {
    pub point: Vector3<f64>,
    pub ideal: f64,
    pub estimated: Option<f64>,
    pub gaussian: usize,
    pub normal: Vector3<f64>,
}

/// Surface normal of one Gaussian: the axis of its smallest scale, oriented
/// away from the camera so the signed distance grows behind the surface.
fn oriented_normal(cloud: &GaussianCloud, g: usize, camera: &Camera) -> (Vector3<f64>, usize, f64) {
    let gauss = &cloud.gaussians[g];
    let mut axis = 0usize;
    for k in 1..3 {
        if gauss.log_scale[k] < gauss.log_scale[axis] {
            axis = k;
        }
    }
    let rot = quat_to_rotation(&normalize_quat(&gauss.rotation));
    let n_raw: Vector3<f64> = rot.column(axis).into();
    let outward = gauss.position - camera.center_world();
    let sign = if n_raw.dot(&outward) < 0.0 { -1.0 } else { 1.0 };
    (sign * n_raw, axis, sign)
}

/// Signed distance implied by the Gaussian density, `±s·sqrt(-2 ln d)`,
/// positive beyond the closest Gaussian's surface as seen from the camera.
pub fn ideal_sdf(
    p: &Vector3<f64>,
    cloud: &GaussianCloud,
    camera: &Camera,
) -> Result<(f64, Vector3<f64>, usize)> {
    let cache = DensityCache::new(cloud, None);
    ideal_sdf_cached(p, cloud, &cache, camera)
}

/// [`ideal_sdf`] against a prebuilt cache, for batch evaluation.
pub fn ideal_sdf_cached(
    p: &Vector3<f64>,
    cloud: &GaussianCloud,
    cache: &DensityCache,
    camera: &Camera,
) -> Result<(f64, Vector3<f64>, usize)> {
    let g = closest_gaussian(p, cloud)?;
    let (normal, axis, _) = oriented_normal(cloud, g, camera);
    let d = cache.density(p).clamp(DENSITY_FLOOR, DENSITY_CEIL);
    let magnitude = cloud.gaussians[g].log_scale[axis].exp() * (-2.0 * d.ln()).sqrt();
    let sgn = if (p - cloud.gaussians[g].position).dot(&normal) >= 0.0 { 1.0 } else { -1.0 };
    Ok((sgn * magnitude, normal, g))
}

fn bilinear_axis(x: f64, n: usize) -> (usize, usize, f64) {
    if n < 2 {
        return (0, 0, 0.0);
    }
    let x = x.clamp(0.0, (n - 1) as f64);
    let i0 = (x.floor() as usize).min(n - 2);
    (i0, i0 + 1, x - i0 as f64)
}

/// Bilinear depth sample with its stencil (pixel index, weight).
fn sample_depth(depth: &Image, u: f64, v: f64) -> (f64, [(usize, f64); 4]) {
    let (x0, x1, fx) = bilinear_axis(u, depth.width);
    let (y0, y1, fy) = bilinear_axis(v, depth.height);
    let px = [
        (depth.idx(y0, x0, 0), (1.0 - fx) * (1.0 - fy)),
        (depth.idx(y0, x1, 0), fx * (1.0 - fy)),
        (depth.idx(y1, x0, 0), (1.0 - fx) * fy),
        (depth.idx(y1, x1, 0), fx * fy),
    ];
    let value = px.iter().map(|&(i, w)| depth.data[i] * w).sum();
    (value, px)
}

/// Depth discrepancy `camera_depth(p) - depth_map(project(p))`; `None` when
/// the projection falls outside the image.
pub fn estimated_sdf(p: &Vector3<f64>, depth_map: &Image, camera: &Camera) -> Option<f64> {
    let pc = camera.to_camera(p);
    if pc.z <= 0.0 {
        return None;
    }
    let (u, v) = camera.project_camera_point(&pc);
    if u < 0.0 || v < 0.0 || u > (depth_map.width - 1) as f64 || v > (depth_map.height - 1) as f64 {
        return None;
    }
    Some(pc.z - sample_depth(depth_map, u, v).0)
}

/// The three surface-alignment terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceLosses {
    pub sdf: f64,
    pub normal: f64,
    pub opacity: f64,
}

/// Gradients of the surface terms. `gaussians` carries d(L_SDF + L_norm);
/// `opacity_logit` carries dL_opacity alone so the caller can weight the
/// entropy term separately; `d_depth` is the rendered-depth cotangent.
pub struct SurfaceGrads {
    pub gaussians: GaussianGradients,
    pub opacity_logit: Vec<f64>,
    pub d_depth: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceOptions {
    /// Mahalanobis cutoff for the density sum; `None` is the exact path.
    pub cutoff: Option<f64>,
    /// Average the opacity entropy over Gaussians instead of summing.
    pub opacity_mean: bool,
}

impl Default for SurfaceOptions {
    fn default() -> Self {
        SurfaceOptions { cutoff: Some(3.0), opacity_mean: true }
    }
}

struct SurfAcc {
    sdf: f64,
    norm: f64,
    valid: usize,
    d_pos: Vec<Vector3<f64>>,
    d_ls: Vec<Vector3<f64>>,
    d_logit: Vec<f64>,
    d_icov: Vec<Matrix3<f64>>,
    d_rotcol: Vec<Matrix3<f64>>,
    d_depth: Vec<f64>,
    scratch: Vec<(usize, Vector3<f64>, Vector3<f64>, f64)>,
}

impl SurfAcc {
    fn zeros(n: usize, pixels: usize) -> Self {
        SurfAcc {
            sdf: 0.0,
            norm: 0.0,
            valid: 0,
            d_pos: vec![Vector3::zeros(); n],
            d_ls: vec![Vector3::zeros(); n],
            d_logit: vec![0.0; n],
            d_icov: vec![Matrix3::zeros(); n],
            d_rotcol: vec![Matrix3::zeros(); n],
            d_depth: vec![0.0; pixels],
            scratch: Vec::new(),
        }
    }

    fn merge(&mut self, other: SurfAcc) {
        self.sdf += other.sdf;
        self.norm += other.norm;
        self.valid += other.valid;
        for i in 0..self.d_pos.len() {
            self.d_pos[i] += other.d_pos[i];
            self.d_ls[i] += other.d_ls[i];
            self.d_logit[i] += other.d_logit[i];
            self.d_icov[i] += other.d_icov[i];
            self.d_rotcol[i] += other.d_rotcol[i];
        }
        for (a, b) in self.d_depth.iter_mut().zip(other.d_depth) {
            *a += b;
        }
    }
}

/// Forward-only surface terms.
pub fn surface_losses(
    points: &[Vector3<f64>],
    cloud: &GaussianCloud,
    camera: &Camera,
    depth: &Image,
    opts: &SurfaceOptions,
) -> Result<SurfaceLosses> {
    Ok(surface_losses_with_grad(points, cloud, camera, depth, opts)?.0)
}

/// Surface terms plus gradients w.r.t. Gaussian parameters and the rendered
/// depth map. Deterministic for any thread count.
pub fn surface_losses_with_grad(
    points: &[Vector3<f64>],
    cloud: &GaussianCloud,
    camera: &Camera,
    depth: &Image,
    opts: &SurfaceOptions,
) -> Result<(SurfaceLosses, SurfaceGrads)> {
    if points.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if depth.channels != 1 {
        return Err(Error::ShapeMismatch("depth map must be single-channel".into()));
    }
    let n = cloud.len();
    let cache = DensityCache::new(cloud, opts.cutoff);
    // Per-Gaussian constants reused across samples.
    let normals: Vec<(Vector3<f64>, usize, f64)> =
        (0..n).map(|g| oriented_normal(cloud, g, camera)).collect();
    let dsig: Vec<f64> = cache.opacities.iter().map(|&s| s * (1.0 - s)).collect();

    let chunk = points.len().div_ceil(8).max(1);
    let total = parallel::chunked_fold(
        points.len(),
        chunk,
        || SurfAcc::zeros(n, depth.data.len()),
        |acc, si| {
            let p = &points[si];
            // Candidate pass: density, its spatial gradient, and the
            // closest Gaussian.
            acc.scratch.clear();
            let mut den = 0.0;
            let mut dvec = Vector3::zeros();
            let mut best = (f64::INFINITY, usize::MAX);
            cache.for_candidates(p, |g| {
                let r = p - cache.positions[g];
                let w = cache.inv_cov[g] * r;
                let q = r.dot(&w);
                if q < best.0 {
                    best = (q, g);
                }
                if cache.cutoff.map_or(true, |c| q <= c * c) {
                    let ex = (-0.5 * q).exp();
                    den += cache.opacities[g] * ex;
                    dvec -= cache.opacities[g] * ex * w;
                    acc.scratch.push((g, r, w, ex));
                }
            });
            let gstar = if best.1 != usize::MAX {
                best.1
            } else {
                // Far from every candidate cell: exhaustive argmin.
                let mut fallback = (f64::INFINITY, 0usize);
                for g in 0..n {
                    let r = p - cache.positions[g];
                    let q = r.dot(&(cache.inv_cov[g] * r));
                    if q < fallback.0 {
                        fallback = (q, g);
                    }
                }
                fallback.1
            };
            let (normal, axis, _) = normals[gstar];
            let r_star = p - cache.positions[gstar];
            let sgn = if r_star.dot(&normal) >= 0.0 { 1.0 } else { -1.0 };
            let d_cl = den.clamp(DENSITY_FLOOR, DENSITY_CEIL);
            let lne = -2.0 * d_cl.ln();
            let sq = lne.sqrt();
            let s_star = cloud.gaussians[gstar].log_scale[axis].exp();
            let f = sgn * s_star * sq;

            let pc = camera.to_camera(p);
            if pc.z <= 0.0 {
                return;
            }
            let (u, v) = camera.project_camera_point(&pc);
            if u < 0.0
                || v < 0.0
                || u > (depth.width - 1) as f64
                || v > (depth.height - 1) as f64
            {
                return;
            }
            let (dsamp, stencil) = sample_depth(depth, u, v);
            let fhat = pc.z - dsamp;

            let e = fhat - f;
            acc.sdf += e.abs();
            acc.valid += 1;
            let se = e.signum();

            // d(L_SDF)/df and the depth-map cotangent (pre-normalization).
            let d_f = -se;
            acc.d_ls[gstar][axis] += d_f * f;
            if den == d_cl {
                let dd = d_f * (-sgn * s_star / (d_cl * sq));
                for &(g, r, w, ex) in &acc.scratch {
                    let cg = cache.opacities[g] * ex;
                    acc.d_logit[g] += dd * ex * dsig[g];
                    acc.d_pos[g] += dd * cg * w;
                    acc.d_icov[g] -= dd * cg * 0.5 * (r * r.transpose());
                }
            }
            for (i, wgt) in stencil {
                acc.d_depth[i] -= se * wgt;
            }

            // Normal alignment.
            let nv = dvec.norm();
            let unit = if nv > 1e-300 { -sgn * dvec / nv } else { Vector3::zeros() };
            let diff = unit - normal;
            acc.norm += diff.norm_squared();
            let d_u = 2.0 * diff;
            if nv > 1e-300 {
                let d_v = -sgn * direction_normalize_backward(&dvec, &d_u);
                for &(g, r, w, ex) in &acc.scratch {
                    let sg = cache.opacities[g] * ex;
                    acc.d_logit[g] += d_v.dot(&(-ex * w)) * dsig[g];
                    acc.d_pos[g] += sg * (cache.inv_cov[g] * d_v - w * w.dot(&d_v));
                    acc.d_icov[g] +=
                        sg * (0.5 * d_v.dot(&w) * (r * r.transpose()) - d_v * r.transpose());
                }
            }
            // n appears with a minus sign in the residual.
            let mut d_col = Matrix3::zeros();
            d_col.set_column(axis, &(normals[gstar].2 * -d_u));
            acc.d_rotcol[gstar] += d_col;
        },
        |a, b| a.merge(b),
    );

    let inv = if total.valid > 0 { 1.0 / total.valid as f64 } else { 0.0 };
    let mut grads = GaussianGradients::zeros(cloud);
    for g in 0..n {
        let gauss = &cloud.gaussians[g];
        grads.position[g] = inv * total.d_pos[g];
        let (dls, drot) =
            inverse_covariance_backward(&gauss.log_scale, &gauss.rotation, &total.d_icov[g]);
        grads.log_scale[g] = inv * (total.d_ls[g] + dls);
        let qn = normalize_quat(&gauss.rotation);
        let jac = quat_to_rotation_jacobian(&qn);
        let mut d_qn = Vector4::zeros();
        for c in 0..4 {
            d_qn[c] = jac[c].component_mul(&total.d_rotcol[g]).sum();
        }
        let drot_n = quat_normalize_backward(&gauss.rotation, &d_qn);
        grads.rotation[g] = inv * (drot + drot_n);
        grads.opacity_logit[g] = inv * total.d_logit[g];
    }
    let mut d_depth = Image::zeros(depth.height, depth.width, 1);
    for (a, b) in d_depth.data.iter_mut().zip(&total.d_depth) {
        *a = inv * b;
    }

    // Opacity entropy over the cloud, independent of the sample set.
    let op_scale = if opts.opacity_mean { 1.0 / n as f64 } else { 1.0 };
    let mut l_op = 0.0;
    let mut d_op = vec![0.0; n];
    for (g, gauss) in cloud.gaussians.iter().enumerate() {
        let s = gauss.opacity();
        let sc = s.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
        l_op += -sc * sc.ln();
        if s == sc {
            d_op[g] = op_scale * -(sc.ln() + 1.0) * s * (1.0 - s);
        }
    }
    let losses = SurfaceLosses {
        sdf: total.sdf * inv,
        normal: total.norm * inv,
        opacity: l_op * op_scale,
    };
    Ok((losses, SurfaceGrads { gaussians: grads, opacity_logit: d_op, d_depth }))
}

/// Total objective: L1 + weighted depth, TV, and surface terms.
pub fn total_loss(
    l1: f64,
    depth: f64,
    tv_spatial: f64,
    tv_temporal: f64,
    surface: &SurfaceLosses,
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    Ok(l1
        + weights.lambda_depth * depth
        + weights.lambda_tv_spatial * tv_spatial
        + weights.lambda_tv_temporal * tv_temporal
        + weights.lambda_surface * (surface.sdf + surface.normal + 0.5 * surface.opacity))
}

/// Box-Muller standard normal draw.
pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Draws `count` points near the current surface estimate: uniform non-tool
/// pixels with valid depth, back-projected and jittered along the view ray
/// with Gaussian noise of the given standard deviation.
pub fn sample_surface_points(
    depth: &Image,
    tool_mask: Option<&Image>,
    camera: &Camera,
    count: usize,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vector3<f64>>> {
    let mut valid = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            if depth.get(y, x, 0) <= 0.0 {
                continue;
            }
            if let Some(m) = tool_mask {
                if m.get(y, x, 0) != 0.0 {
                    continue;
                }
            }
            valid.push((y, x));
        }
    }
    if valid.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let center = camera.center_world();
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let (y, x) = valid[rng.gen_range(0..valid.len())];
        let p = camera.unproject(x as f64, y as f64, depth.get(y, x, 0));
        let dir = {
            let d = p - center;
            let norm = d.norm();
            if norm > 0.0 { d / norm } else { Vector3::new(0.0, 0.0, 1.0) }
        };
        let z = standard_normal(rng);
        points.push(p + dir * (noise_std * z));
    }
    Ok(points)
}
