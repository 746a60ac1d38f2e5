//! Two-stage trainer: the canonical Gaussians alone first, then joint
//! optimization with the deformation field, with adaptive densification,
//! per-group learning rates, and bit-exact checkpointing.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FrameRecord};
use crate::deform::{deform_cloud, delta_dim, DeformMLP, HexPlaneSet};
use crate::deform_grad::{deform_backward, FieldGradients};
use crate::gauss::{logit, normalize_quat, quat_to_rotation, Aabb, Gaussian, GaussianCloud};
use crate::img::Image;
use crate::loss::{
    depth_loss_with_grad, importance_maps, masked_l1_with_grad, sample_surface_points,
    spatial_tv_with_grad, standard_normal, surface_losses_with_grad, temporal_tv_with_grad,
    total_loss, LossWeights, SurfaceLosses, SurfaceOptions,
};
use crate::project::ProjectedGaussian;
use crate::render::{render, RenderSettings};
use crate::render_grad::{render_backward, GaussianGradients};
use crate::sh::SH_C0;
use crate::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

/// Everything that shapes a training run. Serializable as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub seed: u64,
    pub loss: LossWeights,
    /// Base position rate; multiplied by the scene extent and decayed
    /// exponentially to `lr_position_final` over the run.
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_sh: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_planes: f64,
    pub lr_mlp: f64,
    pub densify_interval: usize,
    pub densify_threshold: f64,
    pub prune_opacity: f64,
    pub max_screen_radius: f64,
    pub split_scale_factor: f64,
    pub max_gaussians: usize,
    pub spatial_resolutions: Vec<usize>,
    pub time_resolutions: Vec<usize>,
    pub feature_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub surface_samples: usize,
    /// Ray-jitter standard deviation as a multiple of the mean Gaussian scale.
    pub surface_noise_scale: f64,
    pub surface_cutoff: Option<f64>,
    pub opacity_mean: bool,
    pub init_points: usize,
    pub sh_degree: usize,
    pub log_interval: usize,
    /// Steps between mid-run checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_iters: 3000,
            stage2_iters: 60000,
            seed: 0,
            loss: LossWeights::default(),
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_sh: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_planes: 1.6e-2,
            lr_mlp: 1.6e-3,
            densify_interval: 100,
            densify_threshold: 2e-4,
            prune_opacity: 0.005,
            max_screen_radius: 40.0,
            split_scale_factor: 1.6,
            max_gaussians: 100_000,
            spatial_resolutions: vec![32, 64],
            time_resolutions: vec![16, 32],
            feature_dim: 16,
            mlp_hidden: vec![64, 64],
            surface_samples: 2500,
            surface_noise_scale: 2.0,
            surface_cutoff: Some(3.0),
            opacity_mean: true,
            init_points: 2000,
            sh_degree: 1,
            log_interval: 50,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let rates = [
            ("lr_position", self.lr_position),
            ("lr_position_final", self.lr_position_final),
            ("lr_sh", self.lr_sh),
            ("lr_opacity", self.lr_opacity),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_planes", self.lr_planes),
            ("lr_mlp", self.lr_mlp),
        ];
        for (name, v) in rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.densify_interval == 0 {
            return Err(Error::Config("densify_interval must be at least 1".into()));
        }
        if !(self.split_scale_factor > 1.0) {
            return Err(Error::Config("split_scale_factor must exceed 1".into()));
        }
        if self.max_gaussians == 0 || self.init_points == 0 {
            return Err(Error::Config("gaussian counts must be positive".into()));
        }
        if self.spatial_resolutions.len() != self.time_resolutions.len()
            || self.spatial_resolutions.is_empty()
        {
            return Err(Error::Config("plane resolution lists must pair up".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.sh_degree > 3 {
            return Err(Error::Config("sh_degree must be at most 3".into()));
        }
        if self.surface_samples == 0 && self.loss.lambda_surface > 0.0 {
            return Err(Error::Config("surface term enabled but surface_samples is 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn total_iters(&self) -> usize {
        self.stage1_iters + self.stage2_iters
    }
}

/// FNV-1a over the canonical JSON encoding; ties checkpoints to the exact
/// configuration that produced them.
pub fn config_hash(config: &TrainConfig) -> u64 {
    let text = serde_json::to_string(config).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Uniformly samples non-tool pixels with valid depth, back-projects them,
/// and seeds isotropic Gaussians colored from the image.
pub fn init_cloud_from_depth(
    frame: &FrameRecord,
    n_points: usize,
    sh_degree: usize,
    rng: &mut impl Rng,
) -> Result<GaussianCloud> {
    let mut valid = Vec::new();
    for y in 0..frame.depth.height {
        for x in 0..frame.depth.width {
            if frame.depth.get(y, x, 0) > 0.0 && frame.tool_mask.get(y, x, 0) == 0.0 {
                valid.push((y, x));
            }
        }
    }
    if valid.len() < n_points {
        return Err(Error::InsufficientPoints { available: valid.len(), needed: n_points });
    }
    let picks = sample_indices(rng, valid.len(), n_points);
    let mut positions = Vec::with_capacity(n_points);
    let mut colors = Vec::with_capacity(n_points);
    for idx in picks.iter() {
        let (y, x) = valid[idx];
        positions.push(frame.camera.unproject(x as f64, y as f64, frame.depth.get(y, x, 0)));
        colors.push([
            frame.color.get(y, x, 0),
            frame.color.get(y, x, 1),
            frame.color.get(y, x, 2),
        ]);
    }
    // Mean nearest-neighbor distance sets the isotropic starting scale.
    let mut nn_sum = 0.0;
    for (i, p) in positions.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, q) in positions.iter().enumerate() {
            if i != j {
                best = best.min((p - q).norm_squared());
            }
        }
        if best.is_finite() {
            nn_sum += best.sqrt();
        }
    }
    let mean_nn = if n_points > 1 { nn_sum / n_points as f64 } else { 0.01 };
    let log_scale = Vector3::repeat(mean_nn.max(1e-6).ln());
    let k = (sh_degree + 1) * (sh_degree + 1);
    let gaussians: Vec<Gaussian> = positions
        .iter()
        .zip(&colors)
        .map(|(&position, color)| {
            let mut sh = vec![[0.0; 3]; k];
            sh[0] = color.map(|c| (c - 0.5) / SH_C0);
            Gaussian {
                position,
                log_scale,
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                sh,
                opacity_logit: logit(0.1),
            }
        })
        .collect();
    let aabb = Aabb::of_points(&positions).unwrap().expanded(0.2);
    Ok(GaussianCloud { gaussians, scene_aabb: aabb })
}

/// Screen-space gradient statistics accumulated between densification runs.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    pub grad_accum: Vec<f64>,
    pub vis_count: Vec<u32>,
    pub max_radius: Vec<f64>,
}

impl DensifyStats {
    pub fn zeros(n: usize) -> Self {
        DensifyStats {
            grad_accum: vec![0.0; n],
            vis_count: vec![0; n],
            max_radius: vec![0.0; n],
        }
    }

    /// Folds in one step's gradients, counting only Gaussians that reached
    /// the screen.
    pub fn observe(&mut self, grads: &GaussianGradients, projected: &[Option<ProjectedGaussian>]) {
        for (i, proj) in projected.iter().enumerate() {
            if let Some(p) = proj {
                self.grad_accum[i] += grads.mean2d[i].norm();
                self.vis_count[i] += 1;
                self.max_radius[i] = self.max_radius[i].max(p.radius as f64);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Action {
    Keep,
    Drop,
    Clone_,
    Split,
}

/// Clones or splits Gaussians whose mean screen-space gradient exceeds the
/// threshold and prunes nearly transparent or oversized ones. Optimizer
/// moments follow surviving Gaussians; new ones start with zero moments.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &DensifyStats,
    moments: (&mut GaussianGradients, &mut GaussianGradients),
    config: &TrainConfig,
    extent: f64,
    rng: &mut impl Rng,
) -> DensifyOutcome {
    let n = cloud.len();
    debug_assert_eq!(stats.grad_accum.len(), n);
    let at_cap = n >= config.max_gaussians;
    let mut actions = vec![Action::Keep; n];
    let mut outcome = DensifyOutcome::default();
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if !g.is_finite()
            || g.opacity() < config.prune_opacity
            || stats.max_radius[i] > config.max_screen_radius
        {
            actions[i] = Action::Drop;
            outcome.pruned += 1;
            continue;
        }
        if at_cap {
            continue;
        }
        let mean_grad = stats.grad_accum[i] / stats.vis_count[i].max(1) as f64;
        if mean_grad > config.densify_threshold {
            if g.scale().max() > 0.01 * extent {
                actions[i] = Action::Split;
                outcome.split += 1;
            } else {
                actions[i] = Action::Clone_;
                outcome.cloned += 1;
            }
        }
    }

    let (m, v) = moments;
    let mut gaussians = Vec::with_capacity(n);
    let mut additions: Vec<Gaussian> = Vec::new();
    let mut keep_idx = Vec::with_capacity(n);
    for (i, g) in cloud.gaussians.iter().enumerate() {
        match actions[i] {
            Action::Drop => {}
            Action::Keep | Action::Clone_ => {
                gaussians.push(g.clone());
                keep_idx.push(i);
                if actions[i] == Action::Clone_ {
                    additions.push(g.clone());
                }
            }
            Action::Split => {
                // Two samples from the Gaussian's own distribution, shrunk.
                let rot = quat_to_rotation(&normalize_quat(&g.rotation));
                let scale = g.scale();
                let shrink = Vector3::repeat(config.split_scale_factor.ln());
                for _ in 0..2 {
                    let eps = Vector3::new(
                        standard_normal(rng),
                        standard_normal(rng),
                        standard_normal(rng),
                    );
                    let mut child = g.clone();
                    child.position += rot * scale.component_mul(&eps);
                    child.log_scale -= shrink;
                    additions.push(child);
                }
            }
        }
    }
    while gaussians.len() + additions.len() > config.max_gaussians && !additions.is_empty() {
        additions.pop();
    }
    gaussians.extend(additions);
    cloud.gaussians = gaussians;

    let remap = |grads: &mut GaussianGradients| {
        let fresh = GaussianGradients::zeros(cloud);
        let mut out = fresh;
        for (new_i, &old_i) in keep_idx.iter().enumerate() {
            out.position[new_i] = grads.position[old_i];
            out.log_scale[new_i] = grads.log_scale[old_i];
            out.rotation[new_i] = grads.rotation[old_i];
            out.sh[new_i] = grads.sh[old_i].clone();
            out.opacity_logit[new_i] = grads.opacity_logit[old_i];
        }
        *grads = out;
    };
    remap(m);
    remap(v);
    outcome
}

/// One optimization step's scalar summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub frame: usize,
    pub loss: f64,
    pub l1: f64,
    pub depth: f64,
    pub tv_spatial: f64,
    pub tv_temporal: f64,
    pub sdf: f64,
    pub normal: f64,
    pub opacity: f64,
    pub gaussians: usize,
}

/// Full mutable training state; everything needed to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub cloud: GaussianCloud,
    pub planes: HexPlaneSet,
    pub mlp: DeformMLP,
    pub gauss_m: GaussianGradients,
    pub gauss_v: GaussianGradients,
    pub field_m: FieldGradients,
    pub field_v: FieldGradients,
    pub gauss_t: u64,
    pub field_t: u64,
    pub step: usize,
    pub extent: f64,
    pub stats: DensifyStats,
    /// In-memory log of completed steps; not persisted.
    pub records: Vec<StepRecord>,
}

impl TrainState {
    /// Fresh state: depth-initialized cloud, random planes, zero-head MLP.
    pub fn init(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let first = dataset.frames.first().ok_or(Error::EmptySampleSet)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cloud = init_cloud_from_depth(first, config.init_points, config.sh_degree, &mut rng)?;
        let planes = HexPlaneSet::new(
            &config.spatial_resolutions,
            &config.time_resolutions,
            config.feature_dim,
            &mut rng,
        )?;
        let k = (config.sh_degree + 1) * (config.sh_degree + 1);
        let mlp = DeformMLP::new(planes.feature_dim(), &config.mlp_hidden, delta_dim(k), &mut rng);
        let extent = cloud.scene_aabb.radius();
        let n = cloud.len();
        Ok(TrainState {
            gauss_m: GaussianGradients::zeros(&cloud),
            gauss_v: GaussianGradients::zeros(&cloud),
            field_m: FieldGradients::zeros(&planes, &mlp),
            field_v: FieldGradients::zeros(&planes, &mlp),
            cloud,
            planes,
            mlp,
            gauss_t: 0,
            field_t: 0,
            step: 0,
            extent,
            stats: DensifyStats::zeros(n),
            records: Vec::new(),
        })
    }
}

/// Deterministic per-step randomness: one ChaCha stream per step.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

fn position_lr(config: &TrainConfig, extent: f64, step: usize, total: usize) -> f64 {
    let t = if total > 1 { (step as f64 / (total - 1) as f64).clamp(0.0, 1.0) } else { 0.0 };
    extent * config.lr_position * (config.lr_position_final / config.lr_position).powf(t)
}

struct AdamCtx {
    bc1: f64,
    bc2: f64,
}

impl AdamCtx {
    fn new(t: u64) -> Self {
        AdamCtx {
            bc1: 1.0 - ADAM_BETA1.powi(t as i32),
            bc2: 1.0 - ADAM_BETA2.powi(t as i32),
        }
    }

    #[inline]
    fn apply(&self, p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let mh = *m / self.bc1;
        let vh = *v / self.bc2;
        *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update_cloud(
    cloud: &mut GaussianCloud,
    grads: &GaussianGradients,
    m: &mut GaussianGradients,
    v: &mut GaussianGradients,
    t: u64,
    config: &TrainConfig,
    lr_position: f64,
) {
    let ctx = AdamCtx::new(t);
    for (i, g) in cloud.gaussians.iter_mut().enumerate() {
        for k in 0..3 {
            ctx.apply(
                &mut g.position[k],
                grads.position[i][k],
                &mut m.position[i][k],
                &mut v.position[i][k],
                lr_position,
            );
            ctx.apply(
                &mut g.log_scale[k],
                grads.log_scale[i][k],
                &mut m.log_scale[i][k],
                &mut v.log_scale[i][k],
                config.lr_scale,
            );
        }
        for k in 0..4 {
            ctx.apply(
                &mut g.rotation[k],
                grads.rotation[i][k],
                &mut m.rotation[i][k],
                &mut v.rotation[i][k],
                config.lr_rotation,
            );
        }
        for (c, coeff) in g.sh.iter_mut().enumerate() {
            for ch in 0..3 {
                ctx.apply(
                    &mut coeff[ch],
                    grads.sh[i][c][ch],
                    &mut m.sh[i][c][ch],
                    &mut v.sh[i][c][ch],
                    config.lr_sh,
                );
            }
        }
        ctx.apply(
            &mut g.opacity_logit,
            grads.opacity_logit[i],
            &mut m.opacity_logit[i],
            &mut v.opacity_logit[i],
            config.lr_opacity,
        );
    }
}

fn adam_update_field(
    planes: &mut HexPlaneSet,
    mlp: &mut DeformMLP,
    grads: &FieldGradients,
    m: &mut FieldGradients,
    v: &mut FieldGradients,
    t: u64,
    config: &TrainConfig,
) {
    let ctx = AdamCtx::new(t);
    {
        let mut ps = planes.slices_mut();
        let gs = grads.planes.slices();
        let mut ms = m.planes.slices_mut();
        let mut vs = v.planes.slices_mut();
        for s in 0..ps.len() {
            for j in 0..ps[s].len() {
                ctx.apply(&mut ps[s][j], gs[s][j], &mut ms[s][j], &mut vs[s][j], config.lr_planes);
            }
        }
    }
    let mut ps = mlp.slices_mut();
    let gs = grads.mlp.slices();
    let mut ms = m.mlp.slices_mut();
    let mut vs = v.mlp.slices_mut();
    for s in 0..ps.len() {
        for j in 0..ps[s].len() {
            ctx.apply(&mut ps[s][j], gs[s][j], &mut ms[s][j], &mut vs[s][j], config.lr_mlp);
        }
    }
}

fn breakdown_string(
    l1: f64,
    depth: f64,
    tv_s: f64,
    tv_t: f64,
    surface: &SurfaceLosses,
) -> String {
    format!(
        "l1={l1} depth={depth} tv_spatial={tv_s} tv_temporal={tv_t} sdf={} normal={} opacity={}",
        surface.sdf, surface.normal, surface.opacity
    )
}

/// Names the first non-finite entry in each gradient block, for error reports.
fn non_finite_report(cg: &GaussianGradients, fg: Option<&FieldGradients>) -> String {
    let mut parts = Vec::new();
    let bad3 = |vs: &[Vector3<f64>]| vs.iter().position(|v| !v.iter().all(|x| x.is_finite()));
    if let Some(i) = bad3(&cg.position) {
        parts.push(format!("position[{i}]={:?}", cg.position[i]));
    }
    if let Some(i) = bad3(&cg.log_scale) {
        parts.push(format!("log_scale[{i}]={:?}", cg.log_scale[i]));
    }
    if let Some(i) = cg.rotation.iter().position(|v| !v.iter().all(|x| x.is_finite())) {
        parts.push(format!("rotation[{i}]={:?}", cg.rotation[i]));
    }
    if let Some(i) = cg.sh.iter().position(|s| !s.iter().all(|c| c.iter().all(|x| x.is_finite())))
    {
        parts.push(format!("sh[{i}]"));
    }
    if let Some(i) = cg.opacity_logit.iter().position(|x| !x.is_finite()) {
        parts.push(format!("opacity_logit[{i}]={}", cg.opacity_logit[i]));
    }
    if let Some(fg) = fg {
        if let Some(i) =
            fg.planes.slices().iter().position(|s| !s.iter().all(|v| v.is_finite()))
        {
            parts.push(format!("planes[{i}]"));
        }
        if let Some(i) = fg.mlp.slices().iter().position(|s| !s.iter().all(|v| v.is_finite())) {
            parts.push(format!("mlp[{i}]"));
        }
    }
    parts.join(" ")
}

/// Runs `state` forward to the configured iteration count. Writes per-step
/// JSON records and periodic checkpoints into `run_dir` when given.
pub fn train_from(
    dataset: &Dataset,
    config: &TrainConfig,
    mut state: TrainState,
    run_dir: Option<&Path>,
) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let masks: Vec<Image> = dataset.frames.iter().map(|f| f.tool_mask.clone()).collect();
    let maps = importance_maps(&masks, config.loss.alpha)?;
    let settings = RenderSettings::default();
    let total = config.total_iters();
    let densify_until = config.stage1_iters + config.stage2_iters / 2;
    let mut log = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("train_log.jsonl"))?;
            Some(std::io::BufWriter::new(file))
        }
        None => None,
    };

    while state.step < total {
        let step = state.step;
        let stage2 = step >= config.stage1_iters;
        let mut rng = step_rng(config.seed, step);
        let fi = rng.gen_range(0..dataset.len());
        let frame = &dataset.frames[fi];

        // Forward: deform (stage 2 only), render, evaluate every loss term.
        let deformed;
        let rendering: &GaussianCloud = if stage2 {
            deformed = deform_cloud(&state.cloud, &state.planes, &state.mlp, frame.t)?;
            &deformed
        } else {
            &state.cloud
        };
        let out = render(rendering, &frame.camera, &settings)?;
        let (l1, mut d_color) = masked_l1_with_grad(&frame.color, &out.color, &maps[fi])?;
        let (l_depth, d_depth_term) = depth_loss_with_grad(
            &frame.depth,
            &out.depth,
            &frame.tool_mask,
            config.loss.delta,
            frame.camera.far,
        )?;
        let (l_tv, d_color_tv) = spatial_tv_with_grad(&out.color, &frame.tool_mask)?;
        let (l_tvt, d_planes_tv) = if stage2 {
            let (l, g) = temporal_tv_with_grad(&state.planes);
            (l, Some(g))
        } else {
            (0.0, None)
        };
        let surface_on = config.loss.lambda_surface > 0.0;
        let (l_surf, surf_grads) = if surface_on {
            let mean_scale = rendering
                .gaussians
                .iter()
                .map(|g| g.scale().mean())
                .sum::<f64>()
                / rendering.len().max(1) as f64;
            let points = sample_surface_points(
                &frame.depth,
                Some(&frame.tool_mask),
                &frame.camera,
                config.surface_samples,
                config.surface_noise_scale * mean_scale,
                &mut rng,
            )?;
            let opts = SurfaceOptions {
                cutoff: config.surface_cutoff,
                opacity_mean: config.opacity_mean,
            };
            let (l, g) =
                surface_losses_with_grad(&points, rendering, &frame.camera, &out.depth, &opts)?;
            (l, Some(g))
        } else {
            (SurfaceLosses { sdf: 0.0, normal: 0.0, opacity: 0.0 }, None)
        };
        let loss = total_loss(l1, l_depth, l_tv, l_tvt, &l_surf, &config.loss)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: breakdown_string(l1, l_depth, l_tv, l_tvt, &l_surf),
            });
        }

        // Backward: image cotangents into the rasterizer, then the chain
        // through the deformation field.
        for (a, b) in d_color.data.iter_mut().zip(&d_color_tv.data) {
            *a += config.loss.lambda_tv_spatial * b;
        }
        let mut d_depth = d_depth_term;
        for v in &mut d_depth.data {
            *v *= config.loss.lambda_depth;
        }
        if let Some(sg) = &surf_grads {
            for (a, b) in d_depth.data.iter_mut().zip(&sg.d_depth.data) {
                *a += config.loss.lambda_surface * b;
            }
        }
        let d_alpha = Image::zeros(frame.camera.height, frame.camera.width, 1);
        let mut grads =
            render_backward(rendering, &frame.camera, &out, &d_color, &d_depth, &d_alpha)?;
        if let Some(sg) = &surf_grads {
            grads.accumulate(&sg.gaussians, config.loss.lambda_surface);
            for (g, d) in grads.opacity_logit.iter_mut().zip(&sg.opacity_logit) {
                *g += config.loss.lambda_surface * 0.5 * d;
            }
        }
        let (canonical_grads, field_grads) = if stage2 {
            let (mut fg, cg) =
                deform_backward(&state.cloud, &state.planes, &state.mlp, frame.t, &grads)?;
            if let Some(tv) = &d_planes_tv {
                fg.planes.add_scaled(tv, config.loss.lambda_tv_temporal);
            }
            (cg, Some(fg))
        } else {
            (grads, None)
        };
        if !canonical_grads.is_finite()
            || field_grads.as_ref().is_some_and(|f| !f.is_finite())
        {
            return Err(Error::NonFiniteLoss {
                step,
                breakdown: format!(
                    "non-finite gradients ({}); terms: {}",
                    non_finite_report(&canonical_grads, field_grads.as_ref()),
                    breakdown_string(l1, l_depth, l_tv, l_tvt, &l_surf)
                ),
            });
        }

        state.stats.observe(&canonical_grads, &out.intermediates.projected);

        state.gauss_t += 1;
        let lr_pos = position_lr(config, state.extent, step, total);
        adam_update_cloud(
            &mut state.cloud,
            &canonical_grads,
            &mut state.gauss_m,
            &mut state.gauss_v,
            state.gauss_t,
            config,
            lr_pos,
        );
        if let Some(fg) = &field_grads {
            state.field_t += 1;
            adam_update_field(
                &mut state.planes,
                &mut state.mlp,
                fg,
                &mut state.field_m,
                &mut state.field_v,
                state.field_t,
                config,
            );
        }

        let record = StepRecord {
            step,
            stage: if stage2 { 2 } else { 1 },
            frame: fi,
            loss,
            l1,
            depth: l_depth,
            tv_spatial: l_tv,
            tv_temporal: l_tvt,
            sdf: l_surf.sdf,
            normal: l_surf.normal,
            opacity: l_surf.opacity,
            gaussians: state.cloud.len(),
        };
        state.records.push(record);
        if let Some(log) = &mut log {
            if config.log_interval > 0
                && (step % config.log_interval == 0 || step + 1 == total)
            {
                writeln!(log, "{}", serde_json::to_string(&record).unwrap())?;
            }
        }

        state.step += 1;
        if state.step % config.densify_interval == 0
            && state.step <= densify_until
            && state.step < total
        {
            densify_and_prune(
                &mut state.cloud,
                &state.stats,
                (&mut state.gauss_m, &mut state.gauss_v),
                config,
                state.extent,
                &mut rng,
            );
            state.stats = DensifyStats::zeros(state.cloud.len());
        }
        if let Some(dir) = run_dir {
            if config.checkpoint_interval > 0 && state.step % config.checkpoint_interval == 0 {
                save_checkpoint(&state, config, &dir.join(format!("ckpt_{:06}.bin", state.step)))?;
            }
        }
    }
    if let Some(log) = &mut log {
        log.flush()?;
    }
    Ok(state)
}

/// Fresh two-stage run over the dataset.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainState> {
    let state = TrainState::init(dataset, config)?;
    train_from(dataset, config, state, run_dir)
}

const CHECKPOINT_VERSION: u32 = 1;

fn push_vec3s(out: &mut Vec<f64>, xs: &[Vector3<f64>]) {
    for x in xs {
        out.extend_from_slice(&[x[0], x[1], x[2]]);
    }
}

fn push_vec4s(out: &mut Vec<f64>, xs: &[Vector4<f64>]) {
    for x in xs {
        out.extend_from_slice(&[x[0], x[1], x[2], x[3]]);
    }
}

fn push_gauss_grads(out: &mut Vec<f64>, g: &GaussianGradients) {
    push_vec3s(out, &g.position);
    push_vec3s(out, &g.log_scale);
    push_vec4s(out, &g.rotation);
    for sh in &g.sh {
        for c in sh {
            out.extend_from_slice(c);
        }
    }
    out.extend_from_slice(&g.opacity_logit);
}

fn push_field(out: &mut Vec<f64>, planes: &HexPlaneSet, mlp: &DeformMLP) {
    for s in planes.slices() {
        out.extend_from_slice(s);
    }
    for s in mlp.slices() {
        out.extend_from_slice(s);
    }
}

struct Reader<'a> {
    data: &'a [f64],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.at + n > self.data.len() {
            return Err(Error::Format("truncated checkpoint payload".into()));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn one(&mut self) -> Result<f64> {
        Ok(self.take(1)?[0])
    }

    fn vec3s(&mut self, n: usize) -> Result<Vec<Vector3<f64>>> {
        let s = self.take(3 * n)?;
        Ok((0..n).map(|i| Vector3::new(s[3 * i], s[3 * i + 1], s[3 * i + 2])).collect())
    }

    fn vec4s(&mut self, n: usize) -> Result<Vec<Vector4<f64>>> {
        let s = self.take(4 * n)?;
        Ok((0..n)
            .map(|i| Vector4::new(s[4 * i], s[4 * i + 1], s[4 * i + 2], s[4 * i + 3]))
            .collect())
    }

    fn gauss_grads(&mut self, cloud: &GaussianCloud, k: usize) -> Result<GaussianGradients> {
        let n = cloud.len();
        let mut g = GaussianGradients::zeros(cloud);
        g.position = self.vec3s(n)?;
        g.log_scale = self.vec3s(n)?;
        g.rotation = self.vec4s(n)?;
        let sh = self.take(3 * k * n)?;
        for i in 0..n {
            for c in 0..k {
                let base = (i * k + c) * 3;
                g.sh[i][c] = [sh[base], sh[base + 1], sh[base + 2]];
            }
        }
        g.opacity_logit = self.take(n)?.to_vec();
        Ok(g)
    }

    fn field(&mut self, planes: &mut HexPlaneSet, mlp: &mut DeformMLP) -> Result<()> {
        for s in planes.slices_mut() {
            let src = self.take(s.len())?;
            s.copy_from_slice(src);
        }
        for s in mlp.slices_mut() {
            let src = self.take(s.len())?;
            s.copy_from_slice(src);
        }
        Ok(())
    }
}

/// Serializes the full training state. The write is atomic: a temporary
/// file is renamed into place only after everything is flushed.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<()> {
    let n = state.cloud.len();
    let k = state.cloud.gaussians.first().map(|g| g.sh.len()).unwrap_or(1);
    let mut header = String::new();
    header.push_str(&format!("dsplat-ckpt {CHECKPOINT_VERSION}\n"));
    header.push_str(&format!("config_hash {:016x}\n", config_hash(config)));
    header.push_str(&format!("step {}\n", state.step));
    header.push_str(&format!("gauss_t {}\n", state.gauss_t));
    header.push_str(&format!("field_t {}\n", state.field_t));
    header.push_str(&format!("gaussians {n}\n"));
    header.push_str(&format!("sh_coeffs {k}\n"));
    header.push_str(&format!("h {}\n", state.planes.h));
    let join = |xs: &[usize]| {
        xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
    };
    header.push_str(&format!("spatial {}\n", join(&state.planes.spatial_resolutions())));
    header.push_str(&format!("time {}\n", join(&state.planes.time_resolutions())));
    header.push_str(&format!(
        "mlp {} {} {}\n",
        state.mlp.in_dim(),
        join(&state.mlp.hidden_dims()),
        state.mlp.out_dim()
    ));
    header.push_str("end_header\n");

    let mut payload: Vec<f64> = Vec::new();
    payload.push(state.extent);
    let aabb = &state.cloud.scene_aabb;
    payload.extend_from_slice(&[
        aabb.min[0], aabb.min[1], aabb.min[2], aabb.max[0], aabb.max[1], aabb.max[2],
    ]);
    for g in &state.cloud.gaussians {
        payload.extend_from_slice(&[g.position[0], g.position[1], g.position[2]]);
    }
    for g in &state.cloud.gaussians {
        payload.extend_from_slice(&[g.log_scale[0], g.log_scale[1], g.log_scale[2]]);
    }
    for g in &state.cloud.gaussians {
        payload.extend_from_slice(&[g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]]);
    }
    for g in &state.cloud.gaussians {
        for c in &g.sh {
            payload.extend_from_slice(c);
        }
    }
    for g in &state.cloud.gaussians {
        payload.push(g.opacity_logit);
    }
    push_gauss_grads(&mut payload, &state.gauss_m);
    push_gauss_grads(&mut payload, &state.gauss_v);
    push_field(&mut payload, &state.planes, &state.mlp);
    push_field(&mut payload, &state.field_m.planes, &state.field_m.mlp);
    push_field(&mut payload, &state.field_v.planes, &state.field_v.mlp);
    payload.extend_from_slice(&state.stats.grad_accum);
    payload.extend(state.stats.vis_count.iter().map(|&c| c as f64));
    payload.extend_from_slice(&state.stats.max_radius);

    let mut bytes = header.into_bytes();
    bytes.reserve(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::file(&tmp, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e.to_string()))?;
    Ok(())
}

fn header_field<'a>(lines: &'a [(&str, &str)], key: &str, path: &Path) -> Result<&'a str> {
    lines
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::file(path, format!("checkpoint header missing `{key}`")))
}

fn parse_list(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| Error::Format(format!("bad integer {t}"))))
        .collect()
}

/// Reads a checkpoint back. When a config is supplied its hash must match
/// the one recorded at save time.
pub fn load_checkpoint(path: &Path, config: Option<&TrainConfig>) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::file(path, "missing checkpoint header"))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::file(path, "checkpoint header is not UTF-8"))?;
    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    let version: u32 = match magic.strip_prefix("dsplat-ckpt ") {
        Some(v) => v.trim().parse().unwrap_or(0),
        None => return Err(Error::file(path, "not a checkpoint file")),
    };
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let fields: Vec<(&str, &str)> = lines
        .take_while(|l| *l != "end_header")
        .filter_map(|l| l.split_once(' '))
        .collect();
    let stored_hash = u64::from_str_radix(header_field(&fields, "config_hash", path)?, 16)
        .map_err(|_| Error::file(path, "bad config hash"))?;
    if let Some(cfg) = config {
        let provided = config_hash(cfg);
        if provided != stored_hash {
            return Err(Error::ConfigHashMismatch { checkpoint: stored_hash, provided });
        }
    }
    let step: usize = header_field(&fields, "step", path)?.parse().map_err(|_| {
        Error::file(path, "bad step")
    })?;
    let gauss_t: u64 =
        header_field(&fields, "gauss_t", path)?.parse().map_err(|_| Error::file(path, "bad gauss_t"))?;
    let field_t: u64 =
        header_field(&fields, "field_t", path)?.parse().map_err(|_| Error::file(path, "bad field_t"))?;
    let n: usize =
        header_field(&fields, "gaussians", path)?.parse().map_err(|_| Error::file(path, "bad count"))?;
    let k: usize =
        header_field(&fields, "sh_coeffs", path)?.parse().map_err(|_| Error::file(path, "bad sh count"))?;
    let h: usize =
        header_field(&fields, "h", path)?.parse().map_err(|_| Error::file(path, "bad h"))?;
    let spatial = parse_list(header_field(&fields, "spatial", path)?)?;
    let time = parse_list(header_field(&fields, "time", path)?)?;
    let mlp_dims = parse_list(header_field(&fields, "mlp", path)?)?;
    if mlp_dims.len() < 2 {
        return Err(Error::file(path, "bad mlp dims"));
    }

    let body = &bytes[header_end..];
    if body.len() % 8 != 0 {
        return Err(Error::file(path, "truncated checkpoint payload"));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut r = Reader { data: &data, at: 0 };
    let mut inner = || -> Result<TrainState> {
        let extent = r.one()?;
        let aabb_vals = r.take(6)?;
        let aabb = Aabb::new(
            Vector3::new(aabb_vals[0], aabb_vals[1], aabb_vals[2]),
            Vector3::new(aabb_vals[3], aabb_vals[4], aabb_vals[5]),
        );
        let positions = r.vec3s(n)?;
        let log_scales = r.vec3s(n)?;
        let rotations = r.vec4s(n)?;
        let sh_flat = r.take(3 * k * n)?.to_vec();
        let opacities = r.take(n)?.to_vec();
        let gaussians: Vec<Gaussian> = (0..n)
            .map(|i| {
                let sh = (0..k)
                    .map(|c| {
                        let base = (i * k + c) * 3;
                        [sh_flat[base], sh_flat[base + 1], sh_flat[base + 2]]
                    })
                    .collect();
                Gaussian {
                    position: positions[i],
                    log_scale: log_scales[i],
                    rotation: rotations[i],
                    sh,
                    opacity_logit: opacities[i],
                }
            })
            .collect();
        let cloud = GaussianCloud { gaussians, scene_aabb: aabb };
        let gauss_m = r.gauss_grads(&cloud, k)?;
        let gauss_v = r.gauss_grads(&cloud, k)?;
        let mut planes = HexPlaneSet::zeros(&spatial, &time, h)?;
        let hidden = &mlp_dims[1..mlp_dims.len() - 1];
        let mut mlp = DeformMLP::zeros(mlp_dims[0], hidden, mlp_dims[mlp_dims.len() - 1]);
        r.field(&mut planes, &mut mlp)?;
        let mut field_m = FieldGradients::zeros(&planes, &mlp);
        r.field(&mut field_m.planes, &mut field_m.mlp)?;
        let mut field_v = FieldGradients::zeros(&planes, &mlp);
        r.field(&mut field_v.planes, &mut field_v.mlp)?;
        let grad_accum = r.take(n)?.to_vec();
        let vis_count = r.take(n)?.iter().map(|&v| v as u32).collect();
        let max_radius = r.take(n)?.to_vec();
        Ok(TrainState {
            cloud,
            planes,
            mlp,
            gauss_m,
            gauss_v,
            field_m,
            field_v,
            gauss_t,
            field_t,
            step,
            extent,
            stats: DensifyStats { grad_accum, vis_count, max_radius },
            records: Vec::new(),
        })
    };
    let state = inner().map_err(|e| match e {
        Error::Format(msg) => Error::file(path, msg),
        other => other,
    })?;
    if r.at != data.len() {
        return Err(Error::file(path, "checkpoint has trailing data"));
    }
    Ok(state)
}
