//! Real spherical-harmonics color evaluation, degrees 0 through 3.
//!
//! A Gaussian stores k = (deg+1)^2 coefficient triples. Viewed along unit
//! direction d, the color is `0.5 + sum_i sh[i] * b_i(d)` clamped to be
//! nonnegative per channel.

use nalgebra::Vector3;

use crate::{Error, Result};

pub const SH_C0: f64 = 0.28209479177387814;
const C1: f64 = 0.4886025119029199;
const C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

pub const MAX_SH_COEFFS: usize = 16;

pub fn degree_to_count(degree: usize) -> Result<usize> {
    if degree > 3 {
        return Err(Error::UnsupportedShCount(degree));
    }
    Ok((degree + 1) * (degree + 1))
}

/// Evaluates the first `k` basis functions at unit direction `d`.
pub fn sh_basis(d: &Vector3<f64>, k: usize) -> [f64; MAX_SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; MAX_SH_COEFFS];
    b[0] = SH_C0;
    if k > 1 {
        b[1] = -C1 * y;
        b[2] = C1 * z;
        b[3] = -C1 * x;
    }
    if k > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = C2[0] * x * y;
        b[5] = C2[1] * y * z;
        b[6] = C2[2] * (2.0 * zz - xx - yy);
        b[7] = C2[3] * x * z;
        b[8] = C2[4] * (xx - yy);
        if k > 9 {
            b[9] = C3[0] * y * (3.0 * xx - yy);
            b[10] = C3[1] * x * y * z;
            b[11] = C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = C3[5] * z * (xx - yy);
            b[15] = C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Basis values plus their partial derivatives w.r.t. the direction
/// components (the direction is treated as a free 3-vector here; the
/// normalization Jacobian is applied by the caller).
pub fn sh_basis_gradient(
    d: &Vector3<f64>,
    k: usize,
) -> ([f64; MAX_SH_COEFFS], [[f64; 3]; MAX_SH_COEFFS]) {
    let (x, y, z) = (d.x, d.y, d.z);
    let b = sh_basis(d, k);
    let mut g = [[0.0; 3]; MAX_SH_COEFFS];
    if k > 1 {
        g[1] = [0.0, -C1, 0.0];
        g[2] = [0.0, 0.0, C1];
        g[3] = [-C1, 0.0, 0.0];
    }
    if k > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        g[4] = [C2[0] * y, C2[0] * x, 0.0];
        g[5] = [0.0, C2[1] * z, C2[1] * y];
        g[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        g[7] = [C2[3] * z, 0.0, C2[3] * x];
        g[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
        if k > 9 {
            g[9] = [6.0 * C3[0] * x * y, 3.0 * C3[0] * (xx - yy), 0.0];
            g[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
            g[11] = [
                -2.0 * C3[2] * x * y,
                C3[2] * (4.0 * zz - xx - 3.0 * yy),
                8.0 * C3[2] * y * z,
            ];
            g[12] = [
                -6.0 * C3[3] * x * z,
                -6.0 * C3[3] * y * z,
                C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                C3[4] * (4.0 * zz - 3.0 * xx - yy),
                -2.0 * C3[4] * x * y,
                8.0 * C3[4] * x * z,
            ];
            g[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
            g[15] = [3.0 * C3[6] * (xx - yy), -6.0 * C3[6] * x * y, 0.0];
        }
    }
    (b, g)
}

/// RGB color for coefficients `sh` viewed along unit direction `d`.
pub fn eval_color(sh: &[[f64; 3]], d: &Vector3<f64>) -> [f64; 3] {
    let b = sh_basis(d, sh.len());
    let mut c = [0.5; 3];
    for (coeff, bi) in sh.iter().zip(b.iter()) {
        for ch in 0..3 {
            c[ch] += coeff[ch] * bi;
        }
    }
    [c[0].max(0.0), c[1].max(0.0), c[2].max(0.0)]
}

/// Backward of [`eval_color`]: returns per-coefficient gradients and the
/// gradient w.r.t. the (unit) direction. Channels clamped at zero pass no
/// gradient.
pub fn eval_color_backward(
    sh: &[[f64; 3]],
    d: &Vector3<f64>,
    d_color: &[f64; 3],
) -> (Vec<[f64; 3]>, Vector3<f64>) {
    let k = sh.len();
    let (b, g) = sh_basis_gradient(d, k);
    let mut raw = [0.5; 3];
    for (coeff, bi) in sh.iter().zip(b.iter()) {
        for ch in 0..3 {
            raw[ch] += coeff[ch] * bi;
        }
    }
    let mut up = *d_color;
    for ch in 0..3 {
        if raw[ch] < 0.0 {
            up[ch] = 0.0;
        }
    }
    let mut d_sh = vec![[0.0; 3]; k];
    let mut d_dir = Vector3::zeros();
    for i in 0..k {
        for ch in 0..3 {
            d_sh[i][ch] = up[ch] * b[i];
        }
        let w = up[0] * sh[i][0] + up[1] * sh[i][1] + up[2] * sh[i][2];
        d_dir.x += w * g[i][0];
        d_dir.y += w * g[i][1];
        d_dir.z += w * g[i][2];
    }
    (d_sh, d_dir)
}

/// Jacobian of the direction normalization `d = v/|v|` applied to an
/// upstream unit-direction gradient; returns the gradient w.r.t. `v`.
pub fn direction_normalize_backward(v: &Vector3<f64>, d_dir: &Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n == 0.0 {
        return Vector3::zeros();
    }
    let d = v / n;
    (d_dir - d * d.dot(d_dir)) / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_unit(rng: &mut StdRng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn constant_term_reproduces_dc_color() {
        let sh = vec![[(0.7 - 0.5) / SH_C0, (0.2 - 0.5) / SH_C0, 0.0]];
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..10 {
            let d = random_unit(&mut rng);
            let c = eval_color(&sh, &d);
            assert!((c[0] - 0.7).abs() < 1e-12);
            assert!((c[1] - 0.2).abs() < 1e-12);
            assert!((c[2] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_is_orthonormal_under_monte_carlo() {
        // The basis must integrate to delta_ij over the unit sphere; a
        // uniform Monte Carlo average of b_i b_j then equals delta_ij / 4pi.
        let mut rng = StdRng::seed_from_u64(11);
        let n = 400_000;
        let mut gram = [[0.0f64; 16]; 16];
        for _ in 0..n {
            let d = random_unit(&mut rng);
            let b = sh_basis(&d, 16);
            for i in 0..16 {
                for j in i..16 {
                    gram[i][j] += b[i] * b[j];
                }
            }
        }
        let inv_4pi = 1.0 / (4.0 * std::f64::consts::PI);
        for i in 0..16 {
            for j in i..16 {
                let mean = gram[i][j] / n as f64;
                let expect = if i == j { inv_4pi } else { 0.0 };
                assert!(
                    (mean - expect).abs() < 4e-3 * inv_4pi.max(1.0),
                    "gram[{i}][{j}] = {mean}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn clamp_blocks_gradient() {
        // Large negative DC forces the red channel below zero.
        let sh = vec![[-10.0, 0.1, 0.2]];
        let d = Vector3::new(0.0, 0.0, 1.0);
        let c = eval_color(&sh, &d);
        assert_eq!(c[0], 0.0);
        let (d_sh, _) = eval_color_backward(&sh, &d, &[1.0, 1.0, 1.0]);
        assert_eq!(d_sh[0][0], 0.0);
        assert!(d_sh[0][1] > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(23);
        for degree in 0..4usize {
            let k = (degree + 1) * (degree + 1);
            let sh: Vec<[f64; 3]> = (0..k)
                .map(|_| {
                    [
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    ]
                })
                .collect();
            let d = random_unit(&mut rng);
            let w = [
                rng.gen_range(0.1..1.0f64),
                rng.gen_range(0.1..1.0),
                rng.gen_range(0.1..1.0),
            ];
            let loss = |sh: &[[f64; 3]], d: &Vector3<f64>| {
                let c = eval_color(sh, d);
                w[0] * c[0] + w[1] * c[1] + w[2] * c[2]
            };
            let (d_sh, d_dir) = eval_color_backward(&sh, &d, &w);
            let h = 1e-6;
            for i in 0..k {
                for ch in 0..3 {
                    let mut a = sh.clone();
                    let mut b = sh.clone();
                    a[i][ch] += h;
                    b[i][ch] -= h;
                    let fd = (loss(&a, &d) - loss(&b, &d)) / (2.0 * h);
                    assert!(
                        (fd - d_sh[i][ch]).abs() < 1e-7,
                        "deg {degree} sh[{i}][{ch}]: {fd} vs {}",
                        d_sh[i][ch]
                    );
                }
            }
            // Direction gradient in the ambient (unnormalized) sense.
            for axis in 0..3 {
                let mut a = d;
                let mut b = d;
                a[axis] += h;
                b[axis] -= h;
                let fd = (loss(&sh, &a) - loss(&sh, &b)) / (2.0 * h);
                assert!(
                    (fd - d_dir[axis]).abs() < 1e-6,
                    "deg {degree} dir[{axis}]: {fd} vs {}",
                    d_dir[axis]
                );
            }
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let v = Vector3::new(0.4, -1.2, 2.0);
        let up = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let loss = |v: &Vector3<f64>| (v / v.norm()).dot(&up);
        let grad = direction_normalize_backward(&v, &up);
        let h = 1e-6;
        for axis in 0..3 {
            let mut a = v;
            let mut b = v;
            a[axis] += h;
            b[axis] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - grad[axis]).abs() < 1e-8);
        }
    }
}
