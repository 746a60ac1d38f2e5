//! Forward rasterization: tile-binned front-to-back compositing of projected
//! Gaussians, plus a naive all-splats-per-pixel renderer used as an oracle.
//!
//! Both renderers share the same per-splat alpha evaluation and the same
//! integer footprint predicate, so with the optional cutoffs disabled their
//! outputs agree bit for bit.

use crate::camera::Camera;
use crate::gauss::{build_covariance, sh_count_to_degree, GaussianCloud};
use crate::img::Image;
use crate::parallel;
use crate::project::{project_gaussian, ProjectedGaussian};
use crate::sh::eval_color;
use crate::Result;

/// Upper clamp on per-splat alpha; keeps 1-alpha bounded away from zero for
/// the backward pass.
pub const ALPHA_CLAMP: f64 = 0.999;

/// Accumulated-weight floor below which a pixel's expected depth is zero.
pub const DEPTH_EPS: f64 = 1e-8;

/// Optional rasterizer cutoffs. Defaults mirror common splatting practice;
/// [`RenderSettings::exact`] disables everything optional for comparisons
/// against oracles and finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Skip contributions whose alpha falls below this threshold.
    pub alpha_skip: Option<f64>,
    /// Stop a pixel before a splat would push transmittance below this.
    pub early_stop: Option<f64>,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            tile_size: 16,
            alpha_skip: Some(1.0 / 255.0),
            early_stop: Some(1e-4),
        }
    }
}

impl RenderSettings {
    pub fn exact() -> Self {
        RenderSettings { tile_size: 16, alpha_skip: None, early_stop: None }
    }
}

/// Alpha of a projected splat at a pixel, or `None` when the pixel is
/// outside the splat's integer footprint box (or the quadratic form is
/// degenerate). This is the single contribution predicate shared by the
/// tiled renderer, the naive renderer, and the backward pass.
#[inline]
pub(crate) fn splat_alpha(p: &ProjectedGaussian, opacity: f64, px: i64, py: i64) -> Option<f64> {
    if !p.covers(px, py) {
        return None;
    }
    let dx = px as f64 - p.mean.x;
    let dy = py as f64 - p.mean.y;
    let power = -0.5 * (p.conic[(0, 0)] * dx * dx + p.conic[(1, 1)] * dy * dy)
        - p.conic[(0, 1)] * dx * dy;
    if power > 0.0 {
        return None;
    }
    Some((opacity * power.exp()).min(ALPHA_CLAMP))
}

/// Per-Gaussian data shared by the forward and backward passes.
pub(crate) struct Prepared {
    pub projected: Vec<Option<ProjectedGaussian>>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
}

pub(crate) fn prepare(cloud: &GaussianCloud, camera: &Camera) -> Result<Prepared> {
    camera.validate()?;
    let per = parallel::map_slice(&cloud.gaussians, |g| -> Result<_> {
        sh_count_to_degree(g.sh.len())?;
        let cov = build_covariance(&g.log_scale, &g.rotation)?;
        let proj = project_gaussian(camera, &g.position, &cov);
        let dir = camera.view_direction(&g.position);
        Ok((proj, eval_color(&g.sh, &dir), g.opacity()))
    });
    let mut prep = Prepared {
        projected: Vec::with_capacity(per.len()),
        colors: Vec::with_capacity(per.len()),
        opacities: Vec::with_capacity(per.len()),
    };
    for r in per {
        let (proj, color, opacity) = r?;
        prep.projected.push(proj);
        prep.colors.push(color);
        prep.opacities.push(opacity);
    }
    Ok(prep)
}

/// Visible splat indices in compositing order: ascending camera depth, ties
/// broken by ascending index.
pub fn sorted_order(projected: &[Option<ProjectedGaussian>]) -> Vec<u32> {
    let mut order: Vec<u32> = projected
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|_| i as u32))
        .collect();
    order.sort_unstable_by(|&a, &b| {
        let za = projected[a as usize].as_ref().unwrap().depth;
        let zb = projected[b as usize].as_ref().unwrap().depth;
        za.total_cmp(&zb).then(a.cmp(&b))
    });
    order
}

/// Per-tile splat lists in compositing order.
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    /// Pixel rectangle of tile `ti` as (x0, y0, x1, y1), exclusive ends.
    pub fn tile_rect(&self, ti: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = ti % self.tiles_x;
        let ty = ti / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(width), (y0 + self.tile_size).min(height))
    }
}

/// Assigns every visible splat to each tile its footprint box overlaps,
/// keeping compositing order inside each list.
pub fn bin_tiles(
    projected: &[Option<ProjectedGaussian>],
    width: usize,
    height: usize,
    tile_size: usize,
) -> TileGrid {
    assert!(tile_size > 0, "tile size must be positive");
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for idx in sorted_order(projected) {
        let p = projected[idx as usize].as_ref().unwrap();
        let tx0 = p.x_lo as usize / tile_size;
        let tx1 = p.x_hi as usize / tile_size;
        let ty0 = p.y_lo as usize / tile_size;
        let ty1 = p.y_hi as usize / tile_size;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(idx);
            }
        }
    }
    TileGrid { tile_size, tiles_x, tiles_y, lists }
}

/// Everything the backward pass needs to replay compositing.
pub struct RenderIntermediates {
    pub projected: Vec<Option<ProjectedGaussian>>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub tiles: TileGrid,
    /// Final transmittance per pixel, row-major.
    pub final_t: Vec<f64>,
    /// Number of composited contributions per pixel, row-major.
    pub n_contrib: Vec<u32>,
    pub settings: RenderSettings,
}

pub struct RenderOutput {
    /// H x W x 3 composited color.
    pub color: Image,
    /// H x W expected depth in world units; zero where nothing accumulated.
    pub depth: Image,
    /// H x W accumulated opacity.
    pub alpha: Image,
    pub intermediates: RenderIntermediates,
}

struct PixelResult {
    color: [f64; 3],
    depth: f64,
    alpha: f64,
    final_t: f64,
    n_contrib: u32,
}

/// Front-to-back compositing of one pixel over a splat index list.
fn composite_pixel(
    list: &[u32],
    projected: &[Option<ProjectedGaussian>],
    colors: &[[f64; 3]],
    opacities: &[f64],
    px: i64,
    py: i64,
    settings: &RenderSettings,
) -> PixelResult {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut draw = 0.0;
    let mut a = 0.0;
    let mut n = 0u32;
    for &idx in list {
        let i = idx as usize;
        let p = projected[i].as_ref().unwrap();
        let Some(alpha) = splat_alpha(p, opacities[i], px, py) else { continue };
        if let Some(th) = settings.alpha_skip {
            if alpha < th {
                continue;
            }
        }
        let t_next = t * (1.0 - alpha);
        if let Some(es) = settings.early_stop {
            if t_next < es {
                break;
            }
        }
        let w = alpha * t;
        let col = &colors[i];
        c[0] += w * col[0];
        c[1] += w * col[1];
        c[2] += w * col[2];
        draw += w * p.depth;
        a += w;
        t = t_next;
        n += 1;
    }
    let depth = if a > DEPTH_EPS { draw / a } else { 0.0 };
    PixelResult { color: c, depth, alpha: a, final_t: t, n_contrib: n }
}

fn assemble(
    camera: &Camera,
    prep: Prepared,
    tiles: TileGrid,
    settings: RenderSettings,
    pixels: Vec<(usize, usize, PixelResult)>,
) -> RenderOutput {
    let (h, w) = (camera.height, camera.width);
    let mut color = Image::zeros(h, w, 3);
    let mut depth = Image::zeros(h, w, 1);
    let mut alpha = Image::zeros(h, w, 1);
    let mut final_t = vec![1.0; h * w];
    let mut n_contrib = vec![0u32; h * w];
    for (px, py, r) in pixels {
        for ch in 0..3 {
            color.set(py, px, ch, r.color[ch]);
        }
        depth.set(py, px, 0, r.depth);
        alpha.set(py, px, 0, r.alpha);
        final_t[py * w + px] = r.final_t;
        n_contrib[py * w + px] = r.n_contrib;
    }
    RenderOutput {
        color,
        depth,
        alpha,
        intermediates: RenderIntermediates {
            projected: prep.projected,
            colors: prep.colors,
            opacities: prep.opacities,
            tiles,
            final_t,
            n_contrib,
            settings,
        },
    }
}

/// Renders the cloud with tile binning. Deterministic: identical inputs give
/// bit-identical images for any thread count.
pub fn render(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    let prep = prepare(cloud, camera)?;
    let (h, w) = (camera.height, camera.width);
    let tiles = bin_tiles(&prep.projected, w, h, settings.tile_size);
    let n_tiles = tiles.lists.len();
    let tile_pixels = parallel::map_range(n_tiles, |ti| {
        let (x0, y0, x1, y1) = tiles.tile_rect(ti, w, h);
        let list = &tiles.lists[ti];
        let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for py in y0..y1 {
            for px in x0..x1 {
                let r = composite_pixel(
                    list,
                    &prep.projected,
                    &prep.colors,
                    &prep.opacities,
                    px as i64,
                    py as i64,
                    settings,
                );
                out.push((px, py, r));
            }
        }
        out
    });
    let pixels = tile_pixels.into_iter().flatten().collect();
    Ok(assemble(camera, prep, tiles, *settings, pixels))
}

/// Oracle renderer: every pixel walks the full depth-sorted splat list with
/// no tiling and no optional cutoffs.
pub fn render_naive(cloud: &GaussianCloud, camera: &Camera) -> Result<RenderOutput> {
    let prep = prepare(cloud, camera)?;
    let (h, w) = (camera.height, camera.width);
    let order = sorted_order(&prep.projected);
    let settings = RenderSettings {
        tile_size: w.max(h).max(1),
        alpha_skip: None,
        early_stop: None,
    };
    let rows = parallel::map_range(h, |py| {
        let mut out = Vec::with_capacity(w);
        for px in 0..w {
            let r = composite_pixel(
                &order,
                &prep.projected,
                &prep.colors,
                &prep.opacities,
                px as i64,
                py as i64,
                &settings,
            );
            out.push((px, py, r));
        }
        out
    });
    let tiles = bin_tiles(&prep.projected, w, h, settings.tile_size);
    let pixels = rows.into_iter().flatten().collect();
    Ok(assemble(camera, prep, tiles, settings, pixels))
}
