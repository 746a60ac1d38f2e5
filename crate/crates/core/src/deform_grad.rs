//! Backward pass through the deformation field: turns gradients on the
//! deformed cloud into gradients on the planes, the MLP, and the canonical
//! cloud parameters.

use nalgebra::Vector3;

use crate::deform::{corner_weights, level_coords, DeformMLP, HexPlaneSet};
use crate::deform::{delta_dim, query_planes};
use crate::gauss::GaussianCloud;
use crate::parallel;
use crate::render_grad::GaussianGradients;
use crate::{Error, Result};

/// Gradients for the deformation field parameters, stored in the same
/// containers as the parameters themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradients {
    pub planes: HexPlaneSet,
    pub mlp: DeformMLP,
}

impl FieldGradients {
    pub fn zeros(planes: &HexPlaneSet, mlp: &DeformMLP) -> Self {
        FieldGradients { planes: planes.zeros_like(), mlp: mlp.zeros_like() }
    }

    pub fn add_scaled(&mut self, other: &FieldGradients, scale: f64) {
        self.planes.add_scaled(&other.planes, scale);
        self.mlp.add_scaled(&other.mlp, scale);
    }

    pub fn is_finite(&self) -> bool {
        self.planes.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
            && self.mlp.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Axis feeding each plane's two coordinates: 0..2 are x, y, z and 3 is time.
const AXIS_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

fn forward_cached(mlp: &DeformMLP, feature: Vec<f64>) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(mlp.layers.len() + 1);
    let mut x = feature;
    let last = mlp.layers.len() - 1;
    for (li, layer) in mlp.layers.iter().enumerate() {
        let mut out = Vec::new();
        layer.forward(&x, &mut out);
        if li != last {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts.push(x);
        x = out;
    }
    acts.push(x);
    acts
}

/// Backpropagates `d_out` through the MLP, accumulating weight gradients
/// into `acc` and returning the feature gradient.
fn backward_mlp(mlp: &DeformMLP, acts: &[Vec<f64>], d_out: &[f64], acc: &mut DeformMLP) -> Vec<f64> {
    let mut d_cur = d_out.to_vec();
    for li in (0..mlp.layers.len()).rev() {
        let layer = &mlp.layers[li];
        let x = &acts[li];
        let gl = &mut acc.layers[li];
        let mut d_prev = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            let d = d_cur[o];
            if d == 0.0 {
                continue;
            }
            gl.b[o] += d;
            let row = o * layer.in_dim;
            for i in 0..layer.in_dim {
                gl.w[row + i] += d * x[i];
                d_prev[i] += layer.w[row + i] * d;
            }
        }
        if li > 0 {
            // ReLU pass-through: the layer input is the rectified value.
            for (dp, &xi) in d_prev.iter_mut().zip(x) {
                if xi <= 0.0 {
                    *dp = 0.0;
                }
            }
        }
        d_cur = d_prev;
    }
    d_cur
}

/// Pulls gradients on a deformed cloud back onto the field and the canonical
/// cloud. The canonical gradients are the upstream ones (every delta is
/// additive) plus the position term that flows through the plane queries.
/// Results are bit-identical for any thread count.
pub fn deform_backward(
    cloud: &GaussianCloud,
    planes: &HexPlaneSet,
    mlp: &DeformMLP,
    t: f64,
    upstream: &GaussianGradients,
) -> Result<(FieldGradients, GaussianGradients)> {
    let n = cloud.len();
    if upstream.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "gradient count {} does not match cloud size {n}",
            upstream.len()
        )));
    }
    if mlp.in_dim() != planes.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "MLP input {} does not match plane feature dim {}",
            mlp.in_dim(),
            planes.feature_dim()
        )));
    }
    for g in &cloud.gaussians {
        if mlp.out_dim() != delta_dim(g.sh.len()) {
            return Err(Error::ShapeMismatch(format!(
                "MLP output {} does not match delta dim {} for k = {}",
                mlp.out_dim(),
                delta_dim(g.sh.len()),
                g.sh.len()
            )));
        }
    }

    let aabb = cloud.scene_aabb;
    let ext = aabb.extent();
    let t = t.clamp(0.0, 1.0);
    let h = planes.h;
    let chunk = n.div_ceil(16).max(1);

    let (field, pos_extra) = parallel::chunked_fold(
        n,
        chunk,
        || (FieldGradients::zeros(planes, mlp), Vec::<Vector3<f64>>::new()),
        |(fg, pos_add), i| {
            let g = &cloud.gaussians[i];
            let norm = aabb.normalize(&g.position);
            // Derivative of the normalized coordinate; zero when the clamp
            // is active or the box is degenerate along an axis.
            let mut dnorm = [0.0f64; 3];
            for k in 0..3 {
                if ext[k] > 0.0 {
                    let raw = (g.position[k] - aabb.min[k]) / ext[k];
                    if (0.0..=1.0).contains(&raw) {
                        dnorm[k] = 1.0 / ext[k];
                    }
                }
            }

            // Forward pass again, keeping per-plane samples for the product
            // rule and layer activations for backprop.
            let mut samples: Vec<[Vec<f64>; 6]> = Vec::with_capacity(planes.levels.len());
            let mut coords_all = Vec::with_capacity(planes.levels.len());
            let mut feature = Vec::with_capacity(planes.feature_dim());
            for level in &planes.levels {
                let coords = level_coords(level, &norm, t);
                let pairs = coords.pairs();
                let mut six: [Vec<f64>; 6] = Default::default();
                let mut prod = vec![1.0; h];
                for (p, plane) in level.planes().into_iter().enumerate() {
                    let mut buf = vec![0.0; h];
                    plane.sample_into(pairs[p].0, pairs[p].1, &mut buf);
                    for c in 0..h {
                        prod[c] *= buf[c];
                    }
                    six[p] = buf;
                }
                feature.extend_from_slice(&prod);
                samples.push(six);
                coords_all.push(coords);
            }
            let acts = forward_cached(mlp, feature);

            // Upstream gradient on the raw MLP output, in delta order.
            let mut d_out = Vec::with_capacity(mlp.out_dim());
            d_out.extend(upstream.position[i].iter());
            d_out.extend(upstream.log_scale[i].iter());
            d_out.extend(upstream.rotation[i].iter());
            for s in &upstream.sh[i] {
                d_out.extend_from_slice(s);
            }
            d_out.push(upstream.opacity_logit[i]);

            let d_feature = backward_mlp(mlp, &acts, &d_out, &mut fg.mlp);

            let mut d_pos = Vector3::zeros();
            for (li, level) in planes.levels.iter().enumerate() {
                let coords = &coords_all[li];
                let six = &samples[li];
                let pairs = coords.pairs();
                let src = level.planes();
                let d_level = &d_feature[li * h..(li + 1) * h];
                for c in 0..h {
                    let df = d_level[c];
                    if df == 0.0 {
                        continue;
                    }
                    let mut pre = [1.0f64; 7];
                    for p in 0..6 {
                        pre[p + 1] = pre[p] * six[p][c];
                    }
                    let mut suf = [1.0f64; 7];
                    for p in (0..6).rev() {
                        suf[p] = suf[p + 1] * six[p][c];
                    }
                    for p in 0..6 {
                        let d_s = df * pre[p] * suf[p + 1];
                        if d_s == 0.0 {
                            continue;
                        }
                        let (a, b) = pairs[p];
                        let sp = src[p];
                        let i00 = sp.idx(a.i0, b.i0, c);
                        let i10 = sp.idx(a.i1, b.i0, c);
                        let i01 = sp.idx(a.i0, b.i1, c);
                        let i11 = sp.idx(a.i1, b.i1, c);
                        let (w00, w10, w01, w11) = corner_weights(a.frac, b.frac);
                        let gp = &mut fg.planes.levels[li].planes_mut()[p].data;
                        gp[i00] += d_s * w00;
                        gp[i10] += d_s * w10;
                        gp[i01] += d_s * w01;
                        gp[i11] += d_s * w11;
                        let (p00, p10, p01, p11) =
                            (sp.data[i00], sp.data[i10], sp.data[i01], sp.data[i11]);
                        let dval_dfa = (1.0 - b.frac) * (p10 - p00) + b.frac * (p11 - p01);
                        let dval_dfb = (1.0 - a.frac) * (p01 - p00) + a.frac * (p11 - p10);
                        let (ax_a, ax_b) = AXIS_PAIRS[p];
                        if ax_a < 3 {
                            d_pos[ax_a] += d_s * dval_dfa * a.dgrid * dnorm[ax_a];
                        }
                        if ax_b < 3 {
                            d_pos[ax_b] += d_s * dval_dfb * b.dgrid * dnorm[ax_b];
                        }
                    }
                }
            }
            pos_add.push(d_pos);
        },
        |(fa, pa), (fb, pb)| {
            fa.add_scaled(&fb, 1.0);
            pa.extend(pb);
        },
    );

    let mut canonical = upstream.clone();
    for (i, dp) in pos_extra.iter().enumerate() {
        canonical.position[i] += dp;
    }
    Ok((field, canonical))
}

/// Convenience forward matching the backward's feature path exactly.
pub fn deformed_feature(planes: &HexPlaneSet, cloud: &GaussianCloud, i: usize, t: f64) -> Vec<f64> {
    query_planes(planes, &cloud.gaussians[i].position, t, &cloud.scene_aabb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::deform_cloud;
    use crate::testutil::random_cloud;
    use nalgebra::Vector4;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn setup(seed: u64, n: usize) -> (GaussianCloud, HexPlaneSet, DeformMLP) {
        let mut rng = StdRng::seed_from_u64(seed);
        let cloud = random_cloud(&mut rng, n, 1);
        let planes = HexPlaneSet::new(&[4, 6], &[3, 4], 4, &mut rng).unwrap();
        let mut mlp = DeformMLP::new(planes.feature_dim(), &[12], delta_dim(4), &mut rng);
        // Nonzero head so gradients reach the planes.
        for w in mlp.layers.last_mut().unwrap().w.iter_mut() {
            *w = rng.gen_range(-0.05..0.05);
        }
        for b in mlp.layers.last_mut().unwrap().b.iter_mut() {
            *b = rng.gen_range(-0.02..0.02);
        }
        (cloud, planes, mlp)
    }

    fn random_upstream(rng: &mut StdRng, cloud: &GaussianCloud) -> GaussianGradients {
        let mut up = GaussianGradients::zeros(cloud);
        for i in 0..cloud.len() {
            up.position[i] = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            up.log_scale[i] = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            up.rotation[i] = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            for s in up.sh[i].iter_mut() {
                for ch in 0..3 {
                    s[ch] = rng.gen_range(-1.0..1.0);
                }
            }
            up.opacity_logit[i] = rng.gen_range(-1.0..1.0);
        }
        up
    }

    /// Scalar surrogate loss: the upstream cotangent dotted with every
    /// deformed parameter.
    fn surrogate(cloud: &GaussianCloud, planes: &HexPlaneSet, mlp: &DeformMLP, t: f64, up: &GaussianGradients) -> f64 {
        let d = deform_cloud(cloud, planes, mlp, t).unwrap();
        let mut l = 0.0;
        for (i, g) in d.gaussians.iter().enumerate() {
            l += up.position[i].dot(&g.position);
            l += up.log_scale[i].dot(&g.log_scale);
            l += up.rotation[i].dot(&g.rotation);
            for (s, u) in g.sh.iter().zip(&up.sh[i]) {
                for ch in 0..3 {
                    l += s[ch] * u[ch];
                }
            }
            l += up.opacity_logit[i] * g.opacity_logit;
        }
        l
    }

    fn check_rel(analytic: f64, fd: f64, tol: f64, what: &str) {
        let denom = analytic.abs().max(fd.abs()).max(1e-4);
        assert!(
            (analytic - fd).abs() / denom < tol,
            "{what}: analytic {analytic} vs fd {fd}"
        );
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (cloud, planes, mlp) = setup(1, 5);
        let up = GaussianGradients::zeros(&cloud);
        let (fg, canon) = deform_backward(&cloud, &planes, &mlp, 0.3, &up).unwrap();
        assert!(fg.planes.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(fg.mlp.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(canon.position.iter().all(|v| *v == Vector3::zeros()));
    }

    #[test]
    fn plane_gradient_touches_at_most_four_corners_per_plane() {
        let (mut cloud, planes, mlp) = setup(2, 3);
        cloud.gaussians.truncate(1);
        let mut up = GaussianGradients::zeros(&cloud);
        up.position[0] = Vector3::new(1.0, 0.0, 0.0);
        let (fg, _) = deform_backward(&cloud, &planes, &mlp, 0.4, &up).unwrap();
        let mut total_nodes = 0usize;
        for level in &fg.planes.levels {
            for plane in level.planes() {
                let mut nodes = 0;
                for i1 in 0..plane.n1 {
                    for i2 in 0..plane.n2 {
                        let touched = (0..plane.h).any(|c| plane.data[plane.idx(i1, i2, c)] != 0.0);
                        if touched {
                            nodes += 1;
                        }
                    }
                }
                assert!(nodes <= 4, "plane with {nodes} touched nodes");
                total_nodes += nodes;
            }
        }
        assert!(total_nodes > 0, "gradient never reached the planes");
        assert!(total_nodes <= 4 * 6 * planes.levels.len());
    }

    #[test]
    fn plane_and_mlp_gradients_match_finite_differences() {
        let (cloud, planes, mlp) = setup(3, 4);
        let mut rng = StdRng::seed_from_u64(30);
        let up = random_upstream(&mut rng, &cloud);
        let t = 0.37;
        let (fg, _) = deform_backward(&cloud, &planes, &mlp, t, &up).unwrap();
        let h = 1e-6;

        // A sample of the plane entries that received gradient.
        let mut seen = 0usize;
        let mut checked = 0usize;
        'outer: for li in 0..planes.levels.len() {
            for p in 0..6 {
                let len = fg.planes.levels[li].planes()[p].data.len();
                for e in 0..len {
                    let analytic = fg.planes.levels[li].planes()[p].data[e];
                    if analytic == 0.0 {
                        continue;
                    }
                    seen += 1;
                    if seen % 7 != 0 {
                        continue;
                    }
                    let mut pp = planes.clone();
                    pp.levels[li].planes_mut()[p].data[e] += h;
                    let up_l = surrogate(&cloud, &pp, &mlp, t, &up);
                    pp.levels[li].planes_mut()[p].data[e] -= 2.0 * h;
                    let dn_l = surrogate(&cloud, &pp, &mlp, t, &up);
                    check_rel(analytic, (up_l - dn_l) / (2.0 * h), 1e-3, "plane entry");
                    checked += 1;
                    if checked >= 25 {
                        break 'outer;
                    }
                }
            }
        }
        assert!(checked >= 10, "too few plane entries exercised ({checked})");

        // A sample of MLP weights in every layer.
        for li in 0..mlp.layers.len() {
            for e in (0..mlp.layers[li].w.len()).step_by(17) {
                let analytic = fg.mlp.layers[li].w[e];
                let mut mm = mlp.clone();
                mm.layers[li].w[e] += h;
                let up_l = surrogate(&cloud, &planes, &mm, t, &up);
                mm.layers[li].w[e] -= 2.0 * h;
                let dn_l = surrogate(&cloud, &planes, &mm, t, &up);
                check_rel(analytic, (up_l - dn_l) / (2.0 * h), 1e-3, "mlp weight");
            }
            for e in 0..mlp.layers[li].b.len().min(4) {
                let analytic = fg.mlp.layers[li].b[e];
                let mut mm = mlp.clone();
                mm.layers[li].b[e] += h;
                let up_l = surrogate(&cloud, &planes, &mm, t, &up);
                mm.layers[li].b[e] -= 2.0 * h;
                let dn_l = surrogate(&cloud, &planes, &mm, t, &up);
                check_rel(analytic, (up_l - dn_l) / (2.0 * h), 1e-3, "mlp bias");
            }
        }
    }

    #[test]
    fn canonical_gradients_match_finite_differences() {
        let (cloud, planes, mlp) = setup(4, 4);
        let mut rng = StdRng::seed_from_u64(40);
        let up = random_upstream(&mut rng, &cloud);
        let t = 0.61;
        let (_, canon) = deform_backward(&cloud, &planes, &mlp, t, &up).unwrap();
        let h = 1e-6;
        for i in 0..cloud.len() {
            for k in 0..3 {
                let mut cc = cloud.clone();
                cc.gaussians[i].position[k] += h;
                let up_l = surrogate(&cc, &planes, &mlp, t, &up);
                cc.gaussians[i].position[k] -= 2.0 * h;
                let dn_l = surrogate(&cc, &planes, &mlp, t, &up);
                check_rel(canon.position[i][k], (up_l - dn_l) / (2.0 * h), 1e-3, "canonical position");
            }
            // Non-position parameters only take the identity path.
            assert_eq!(canon.log_scale[i], up.log_scale[i]);
            assert_eq!(canon.rotation[i], up.rotation[i]);
            assert_eq!(canon.opacity_logit[i], up.opacity_logit[i]);
        }
    }

    #[test]
    fn clamped_position_gets_no_feature_gradient() {
        let (mut cloud, planes, mlp) = setup(5, 1);
        // Far outside the scene box: the normalized coordinate is clamped.
        cloud.gaussians[0].position = Vector3::new(50.0, -40.0, 90.0);
        let mut up = GaussianGradients::zeros(&cloud);
        up.position[0] = Vector3::new(0.25, -0.5, 1.0);
        let (_, canon) = deform_backward(&cloud, &planes, &mlp, 0.5, &up).unwrap();
        assert_eq!(canon.position[0], up.position[0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let (cloud, planes, mlp) = setup(6, 64);
        let mut rng = StdRng::seed_from_u64(60);
        let up = random_upstream(&mut rng, &cloud);
        let (fa, ca) = deform_backward(&cloud, &planes, &mlp, 0.8, &up).unwrap();
        let (fb, cb) = deform_backward(&cloud, &planes, &mlp, 0.8, &up).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(ca, cb);
        assert!(fa.is_finite());
    }

    #[test]
    fn head_bias_gradient_counts_gaussians() {
        // The head bias feeds every Gaussian's delta directly, so its
        // gradient is the sum of the matching upstream entries.
        let (cloud, planes, mlp) = setup(7, 6);
        let mut up = GaussianGradients::zeros(&cloud);
        for i in 0..cloud.len() {
            up.opacity_logit[i] = 1.0;
        }
        let (fg, _) = deform_backward(&cloud, &planes, &mlp, 0.2, &up).unwrap();
        let head = fg.mlp.layers.last().unwrap();
        let last_b = head.b[head.out_dim - 1];
        assert!((last_b - cloud.len() as f64).abs() < 1e-12);
    }
}
