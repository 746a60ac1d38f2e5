//! Analytic backward pass of the rasterizer.
//!
//! Compositing is replayed per tile back to front using the saved final
//! transmittance and contribution counts. Per-tile partial gradients are
//! merged in tile order, then per-Gaussian chains (conic, projection,
//! covariance, spherical harmonics) run independently, so the result is
//! bit-identical for any thread count.

use nalgebra::{Matrix2, Vector2, Vector3, Vector4};

use crate::camera::Camera;
use crate::gauss::{build_covariance, covariance_backward, GaussianCloud};
use crate::img::Image;
use crate::parallel;
use crate::project::{conic_backward, project_backward};
use crate::render::{splat_alpha, RenderOutput, ALPHA_CLAMP, DEPTH_EPS};
use crate::sh::{direction_normalize_backward, eval_color_backward};
use crate::{Error, Result};

/// Loss gradients w.r.t. every Gaussian parameter, plus the screen-space
/// position gradient used by the densification heuristic.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGradients {
    pub position: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub sh: Vec<Vec<[f64; 3]>>,
    pub opacity_logit: Vec<f64>,
    pub mean2d: Vec<Vector2<f64>>,
}

impl GaussianGradients {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        GaussianGradients {
            position: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            sh: cloud.gaussians.iter().map(|g| vec![[0.0; 3]; g.sh.len()]).collect(),
            opacity_logit: vec![0.0; n],
            mean2d: vec![Vector2::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Adds `scale * other` into `self`.
    pub fn accumulate(&mut self, other: &GaussianGradients, scale: f64) {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        for i in 0..self.len() {
            self.position[i] += other.position[i] * scale;
            self.log_scale[i] += other.log_scale[i] * scale;
            self.rotation[i] += other.rotation[i] * scale;
            for (a, b) in self.sh[i].iter_mut().zip(&other.sh[i]) {
                for ch in 0..3 {
                    a[ch] += b[ch] * scale;
                }
            }
            self.opacity_logit[i] += other.opacity_logit[i] * scale;
            self.mean2d[i] += other.mean2d[i] * scale;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.sh.iter().all(|s| s.iter().all(|c| c.iter().all(|x| x.is_finite())))
            && self.opacity_logit.iter().all(|x| x.is_finite())
    }
}

/// Per-splat accumulator in screen space, before the per-Gaussian chains.
#[derive(Clone, Copy)]
struct ScreenGrad {
    d_mean: Vector2<f64>,
    d_conic: Matrix2<f64>,
    d_depth: f64,
    d_color: [f64; 3],
    /// Gradient w.r.t. the activated opacity.
    d_sigma: f64,
}

impl Default for ScreenGrad {
    fn default() -> Self {
        ScreenGrad {
            d_mean: Vector2::zeros(),
            d_conic: Matrix2::zeros(),
            d_depth: 0.0,
            d_color: [0.0; 3],
            d_sigma: 0.0,
        }
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    clamped: f64,
    g_val: f64,
    dx: f64,
    dy: f64,
    b: f64,
}

/// Gradients of a scalar loss w.r.t. all Gaussian parameters, given the
/// loss cotangents of the rendered color, depth, and alpha images.
pub fn render_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    out: &RenderOutput,
    dl_dcolor: &Image,
    dl_ddepth: &Image,
    dl_dalpha: &Image,
) -> Result<GaussianGradients> {
    let (h, w) = (camera.height, camera.width);
    let inter = &out.intermediates;
    if cloud.len() != inter.projected.len() {
        return Err(Error::ShapeMismatch(format!(
            "cloud has {} Gaussians but render output saved {}",
            cloud.len(),
            inter.projected.len()
        )));
    }
    out.color.require_shape(dl_dcolor, "color cotangent")?;
    out.depth.require_shape(dl_ddepth, "depth cotangent")?;
    out.alpha.require_shape(dl_dalpha, "alpha cotangent")?;

    let tiles = &inter.tiles;
    let settings = &inter.settings;
    let n_tiles = tiles.lists.len();

    // Stage 1: per-tile screen-space gradients, replaying each pixel's
    // accepted contributions back to front.
    let tile_grads = parallel::map_range(n_tiles, |ti| {
        let list = &tiles.lists[ti];
        let mut local = vec![ScreenGrad::default(); list.len()];
        if list.is_empty() {
            return local;
        }
        let (x0, y0, x1, y1) = tiles.tile_rect(ti, w, h);
        let mut contribs: Vec<Contribution> = Vec::with_capacity(list.len());
        for py in y0..y1 {
            for px in x0..x1 {
                let pix = py * w + px;
                let n_contrib = inter.n_contrib[pix];
                if n_contrib == 0 {
                    continue;
                }
                let dc = dl_dcolor.pixel(py, px);
                let dd = dl_ddepth.get(py, px, 0);
                let da = dl_dalpha.get(py, px, 0);
                let acc = out.alpha.get(py, px, 0);
                let (dl_draw, da_eff) = if acc > DEPTH_EPS {
                    (dd / acc, da - dd * out.depth.get(py, px, 0) / acc)
                } else {
                    (0.0, da)
                };
                if dc[0] == 0.0 && dc[1] == 0.0 && dc[2] == 0.0 && dl_draw == 0.0 && da_eff == 0.0 {
                    continue;
                }

                // Forward replay: collect the contributions that composited.
                contribs.clear();
                for (slot, &idx) in list.iter().enumerate() {
                    if contribs.len() == n_contrib as usize {
                        break;
                    }
                    let i = idx as usize;
                    let p = inter.projected[i].as_ref().unwrap();
                    let Some(alpha) = splat_alpha(p, inter.opacities[i], px as i64, py as i64)
                    else {
                        continue;
                    };
                    if let Some(th) = settings.alpha_skip {
                        if alpha < th {
                            continue;
                        }
                    }
                    let dx = px as f64 - p.mean.x;
                    let dy = py as f64 - p.mean.y;
                    let power = -0.5
                        * (p.conic[(0, 0)] * dx * dx + p.conic[(1, 1)] * dy * dy)
                        - p.conic[(0, 1)] * dx * dy;
                    let g_val = power.exp();
                    let col = &inter.colors[i];
                    let b = col[0] * dc[0] + col[1] * dc[1] + col[2] * dc[2]
                        + p.depth * dl_draw
                        + da_eff;
                    let clamped = if inter.opacities[i] * g_val >= ALPHA_CLAMP { 0.0 } else { 1.0 };
                    contribs.push(Contribution { slot, alpha, clamped, g_val, dx, dy, b });
                }

                // Back-to-front walk with suffix accumulator.
                let mut t_run = inter.final_t[pix];
                let mut suffix = 0.0;
                for c in contribs.iter().rev() {
                    let one_minus = 1.0 - c.alpha;
                    let t_before = t_run / one_minus;
                    let w_i = c.alpha * t_before;
                    let d_alpha = c.b * t_before - suffix / one_minus;
                    suffix += c.b * w_i;
                    t_run = t_before;

                    let idx = list[c.slot] as usize;
                    let p = inter.projected[idx].as_ref().unwrap();
                    let sg = &mut local[c.slot];
                    for ch in 0..3 {
                        sg.d_color[ch] += w_i * dc[ch];
                    }
                    sg.d_depth += dl_draw * w_i;
                    let d_alpha = d_alpha * c.clamped;
                    sg.d_sigma += d_alpha * c.g_val;
                    let d_g = d_alpha * inter.opacities[idx];
                    let d_power = d_g * c.g_val;
                    sg.d_conic[(0, 0)] += d_power * (-0.5 * c.dx * c.dx);
                    sg.d_conic[(1, 1)] += d_power * (-0.5 * c.dy * c.dy);
                    sg.d_conic[(0, 1)] += d_power * (-c.dx * c.dy);
                    let ddx = d_power * (-(p.conic[(0, 0)] * c.dx + p.conic[(0, 1)] * c.dy));
                    let ddy = d_power * (-(p.conic[(1, 1)] * c.dy + p.conic[(0, 1)] * c.dx));
                    sg.d_mean.x -= ddx;
                    sg.d_mean.y -= ddy;
                }
            }
        }
        local
    });

    // Stage 2: merge tile partials per Gaussian, in tile order.
    let n = cloud.len();
    let mut screen = vec![ScreenGrad::default(); n];
    for (ti, local) in tile_grads.iter().enumerate() {
        for (slot, sg) in local.iter().enumerate() {
            let idx = tiles.lists[ti][slot] as usize;
            let dst = &mut screen[idx];
            dst.d_mean += sg.d_mean;
            dst.d_conic += sg.d_conic;
            dst.d_depth += sg.d_depth;
            for ch in 0..3 {
                dst.d_color[ch] += sg.d_color[ch];
            }
            dst.d_sigma += sg.d_sigma;
        }
    }

    // Stage 3: independent per-Gaussian chains back to the parameters.
    let cam_center = camera.center_world();
    let per = parallel::map_range(n, |i| {
        let g = &cloud.gaussians[i];
        let sg = &screen[i];
        let mut d_position = Vector3::zeros();
        let mut d_log_scale = Vector3::zeros();
        let mut d_rotation = Vector4::zeros();
        let mut d_sh = vec![[0.0; 3]; g.sh.len()];
        let mut d_opacity_logit = 0.0;
        if let Some(p) = inter.projected[i].as_ref() {
            let d_cov2 = conic_backward(&p.conic, &sg.d_conic);
            let cov_world = build_covariance(&g.log_scale, &g.rotation)
                .expect("forward pass already validated parameters");
            let (d_mu, d_cov_world) =
                project_backward(camera, &g.position, &cov_world, &sg.d_mean, &d_cov2, sg.d_depth);
            d_position = d_mu;
            let (d_ls, d_rot) = covariance_backward(&g.log_scale, &g.rotation, &d_cov_world);
            d_log_scale = d_ls;
            d_rotation = d_rot;

            let dir = camera.view_direction(&g.position);
            let (dsh, d_dir) = eval_color_backward(&g.sh, &dir, &sg.d_color);
            d_sh = dsh;
            d_position += direction_normalize_backward(&(g.position - cam_center), &d_dir);

            let sigma = inter.opacities[i];
            d_opacity_logit = sg.d_sigma * sigma * (1.0 - sigma);
        }
        (d_position, d_log_scale, d_rotation, d_sh, d_opacity_logit, sg.d_mean)
    });

    let mut grads = GaussianGradients::zeros(cloud);
    for (i, (p, ls, r, sh, o, m2)) in per.into_iter().enumerate() {
        grads.position[i] = p;
        grads.log_scale[i] = ls;
        grads.rotation[i] = r;
        grads.sh[i] = sh;
        grads.opacity_logit[i] = o;
        grads.mean2d[i] = m2;
    }
    Ok(grads)
}
