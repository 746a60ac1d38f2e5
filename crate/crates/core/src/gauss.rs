//! Gaussian primitives, the canonical cloud, and the shared covariance math.
//!
//! Parameter conventions: scale is stored as a log, opacity as a logit, the
//! quaternion is kept unnormalized and normalized at every use site. The
//! quaternion layout is scalar-first `(w, x, y, z)`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Axis-aligned bounding box in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Aabb { min, max }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    /// Half of the box diagonal; the scene scale used for learning rates.
    pub fn radius(&self) -> f64 {
        0.5 * self.extent().norm()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn clamp_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    /// Maps a point to [0,1]^3 box coordinates, clamping outside values.
    pub fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let e = self.extent();
        Vector3::new(
            if e.x > 0.0 { ((p.x - self.min.x) / e.x).clamp(0.0, 1.0) } else { 0.5 },
            if e.y > 0.0 { ((p.y - self.min.y) / e.y).clamp(0.0, 1.0) } else { 0.5 },
            if e.z > 0.0 { ((p.z - self.min.z) / e.z).clamp(0.0, 1.0) } else { 0.5 },
        )
    }

    /// Grows the box by `frac` of its extent on every side.
    pub fn expanded(&self, frac: f64) -> Aabb {
        let pad = self.extent() * frac;
        Aabb::new(self.min - pad, self.max + pad)
    }

    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Aabb> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut bb = Aabb::new(first, first);
        for p in it {
            for k in 0..3 {
                bb.min[k] = bb.min[k].min(p[k]);
                bb.max[k] = bb.max[k].max(p[k]);
            }
        }
        Some(bb)
    }
}

/// One anisotropic 3D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Unnormalized quaternion, scalar-first (w, x, y, z).
    pub rotation: Vector4<f64>,
    /// k coefficients per channel, k = (deg+1)^2; `sh[i]` is the RGB triple
    /// of basis function i.
    pub sh: Vec<[f64; 3]>,
    pub opacity_logit: f64,
}

impl Gaussian {
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn sh_degree(&self) -> usize {
        sh_count_to_degree(self.sh.len()).expect("invalid stored SH count")
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

pub fn sh_count_to_degree(k: usize) -> Result<usize> {
    match k {
        1 => Ok(0),
        4 => Ok(1),
        9 => Ok(2),
        16 => Ok(3),
        _ => Err(Error::UnsupportedShCount(k)),
    }
}

/// Normalizes a quaternion, falling back to identity for a zero input.
#[inline]
pub fn normalize_quat(q: &Vector4<f64>) -> Vector4<f64> {
    let n = q.norm();
    if n > 0.0 {
        q / n
    } else {
        Vector4::new(1.0, 0.0, 0.0, 0.0)
    }
}

/// Rotation matrix of a normalized scalar-first quaternion.
pub fn quat_to_rotation(qn: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`quat_to_rotation`] w.r.t. the four components of
/// the *normalized* quaternion.
pub fn quat_to_rotation_jacobian(qn: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Backpropagates a gradient w.r.t. the normalized quaternion to the stored
/// unnormalized one: dq̂/dq = (I - q̂ q̂ᵀ) / |q|.
pub fn quat_normalize_backward(q: &Vector4<f64>, d_qn: &Vector4<f64>) -> Vector4<f64> {
    let n = q.norm();
    if n == 0.0 {
        return Vector4::zeros();
    }
    let qn = q / n;
    (d_qn - qn * qn.dot(d_qn)) / n
}

/// Builds Σ = R S Sᵀ Rᵀ from a log-scale vector and an (unnormalized)
/// quaternion. The result is made exactly symmetric.
pub fn build_covariance(log_scale: &Vector3<f64>, rotation: &Vector4<f64>) -> Result<Matrix3<f64>> {
    if !(log_scale.iter().all(|v| v.is_finite()) && rotation.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFiniteParameter);
    }
    let r = quat_to_rotation(&normalize_quat(rotation));
    let s = log_scale.map(f64::exp);
    // M = R S, Σ = M Mᵀ.
    let m = Matrix3::from_columns(&[r.column(0) * s.x, r.column(1) * s.y, r.column(2) * s.z]);
    let mut cov = m * m.transpose();
    // Mirror the upper triangle so symmetry holds bit-exactly.
    cov[(1, 0)] = cov[(0, 1)];
    cov[(2, 0)] = cov[(0, 2)];
    cov[(2, 1)] = cov[(1, 2)];
    Ok(cov)
}

/// Inverse covariance Σ⁻¹ = R S⁻² Rᵀ, plus the rotation used.
/// exp(-2l) with the exponent capped safely below the f64 overflow threshold
/// (with headroom for the rotation products built on top). Degenerate axes
/// otherwise turn into Inf entries whose products with the zero density they
/// imply come out NaN instead of the correct zero.
#[inline]
fn inv_scale_sq(l: f64) -> f64 {
    (-2.0 * l).min(700.0).exp()
}

pub fn inverse_covariance(
    log_scale: &Vector3<f64>,
    rotation: &Vector4<f64>,
) -> (Matrix3<f64>, Matrix3<f64>) {
    let r = quat_to_rotation(&normalize_quat(rotation));
    let inv_s2 = log_scale.map(inv_scale_sq);
    let m = Matrix3::from_columns(&[
        r.column(0) * inv_s2.x,
        r.column(1) * inv_s2.y,
        r.column(2) * inv_s2.z,
    ]);
    let mut p = m * r.transpose();
    p[(1, 0)] = p[(0, 1)];
    p[(2, 0)] = p[(0, 2)];
    p[(2, 1)] = p[(1, 2)];
    (p, r)
}

/// Backward of [`build_covariance`]: maps dL/dΣ to gradients of log-scale and
/// the stored quaternion.
pub fn covariance_backward(
    log_scale: &Vector3<f64>,
    rotation: &Vector4<f64>,
    d_cov: &Matrix3<f64>,
) -> (Vector3<f64>, Vector4<f64>) {
    let qn = normalize_quat(rotation);
    let r = quat_to_rotation(&qn);
    let s = log_scale.map(f64::exp);
    let m = Matrix3::from_columns(&[r.column(0) * s.x, r.column(1) * s.y, r.column(2) * s.z]);
    // Σ = M Mᵀ with M = R S: dL/dM = (G + Gᵀ) M.
    let d_m = (d_cov + d_cov.transpose()) * m;
    // dL/ds_k = (Rᵀ dM)_kk, then ds/dlog_s = s.
    let rt_dm = r.transpose() * d_m;
    let d_log_scale = Vector3::new(rt_dm[(0, 0)] * s.x, rt_dm[(1, 1)] * s.y, rt_dm[(2, 2)] * s.z);
    // dL/dR = dM Sᵀ (S diagonal).
    let d_r = Matrix3::from_columns(&[
        d_m.column(0) * s.x,
        d_m.column(1) * s.y,
        d_m.column(2) * s.z,
    ]);
    let jac = quat_to_rotation_jacobian(&qn);
    let mut d_qn = Vector4::zeros();
    for c in 0..4 {
        d_qn[c] = jac[c].component_mul(&d_r).sum();
    }
    (d_log_scale, quat_normalize_backward(rotation, &d_qn))
}

/// Backward through Σ⁻¹ = R S⁻² Rᵀ: maps dL/dΣ⁻¹ (full matrix, not assumed
/// symmetric) to gradients of log-scale and the stored quaternion.
pub fn inverse_covariance_backward(
    log_scale: &Vector3<f64>,
    rotation: &Vector4<f64>,
    d_p: &Matrix3<f64>,
) -> (Vector3<f64>, Vector4<f64>) {
    let qn = normalize_quat(rotation);
    let r = quat_to_rotation(&qn);
    let inv_s2 = log_scale.map(inv_scale_sq);
    let a = Matrix3::from_diagonal(&inv_s2);
    // dL/dls_k = sum_ab dP_ab/dls_k * G_ab with dP/dls_k = -2 inv_s2_k R e_k e_kᵀ Rᵀ.
    let rt_g_r = r.transpose() * d_p * r;
    let d_log_scale = Vector3::new(
        -2.0 * inv_s2.x * rt_g_r[(0, 0)],
        -2.0 * inv_s2.y * rt_g_r[(1, 1)],
        -2.0 * inv_s2.z * rt_g_r[(2, 2)],
    );
    let jac = quat_to_rotation_jacobian(&qn);
    let mut d_qn = Vector4::zeros();
    for c in 0..4 {
        let d_r = jac[c];
        let dp = d_r * a * r.transpose() + r * a * d_r.transpose();
        d_qn[c] = dp.component_mul(d_p).sum();
    }
    (d_log_scale, quat_normalize_backward(rotation, &d_qn))
}

/// The canonical (time-independent) Gaussian set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub scene_aabb: Aabb,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn sh_degree(&self) -> usize {
        self.gaussians.first().map(|g| g.sh_degree()).unwrap_or(0)
    }

    /// Clamps out-of-box positions into the scene box, returning how many
    /// were moved.
    pub fn clamp_to_aabb(&mut self) -> usize {
        let mut moved = 0;
        for g in &mut self.gaussians {
            if !self.scene_aabb.contains(&g.position) {
                g.position = self.scene_aabb.clamp_point(&g.position);
                moved += 1;
            }
        }
        moved
    }
}

const CLOUD_MAGIC: &str = "dsplat-cloud 1";

/// Writes the cloud in the interchange point-cloud format: a text header
/// followed by one little-endian f32 record per Gaussian in the order
/// position(3), log_scale(3), rotation(4), opacity_logit(1), sh(k*3).
pub fn save_point_cloud(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let k = cloud.gaussians.first().map(|g| g.sh.len()).unwrap_or(1);
    let degree = sh_count_to_degree(k)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let bb = &cloud.scene_aabb;
    write!(
        f,
        "{CLOUD_MAGIC}\ncount {}\nsh_degree {}\naabb {} {} {} {} {} {}\nend_header\n",
        cloud.len(),
        degree,
        bb.min.x, bb.min.y, bb.min.z, bb.max.x, bb.max.y, bb.max.z
    )?;
    let mut rec: Vec<u8> = Vec::with_capacity((11 + 3 * k) * 4);
    for g in &cloud.gaussians {
        if g.sh.len() != k {
            return Err(Error::ShapeMismatch("mixed SH counts in cloud".into()));
        }
        rec.clear();
        let mut push = |v: f64| rec.extend_from_slice(&(v as f32).to_le_bytes());
        for i in 0..3 {
            push(g.position[i]);
        }
        for i in 0..3 {
            push(g.log_scale[i]);
        }
        for i in 0..4 {
            push(g.rotation[i]);
        }
        push(g.opacity_logit);
        for c in &g.sh {
            push(c[0]);
            push(c[1]);
            push(c[2]);
        }
        f.write_all(&rec)?;
    }
    Ok(())
}

/// Reads the interchange point-cloud format. Positions outside the declared
/// box are clamped; the number of clamped points is logged.
pub fn load_point_cloud(path: &Path) -> Result<GaussianCloud> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    let read_line = |r: &mut BufReader<std::fs::File>, line: &mut String| -> Result<String> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(Error::file(path, "truncated header"));
        }
        Ok(line.trim().to_string())
    };
    if read_line(&mut r, &mut line)? != CLOUD_MAGIC {
        return Err(Error::file(path, "not a dsplat point-cloud file"));
    }
    let mut count = None;
    let mut degree = None;
    let mut aabb = None;
    loop {
        let l = read_line(&mut r, &mut line)?;
        if l == "end_header" {
            break;
        }
        let mut it = l.split_whitespace();
        match it.next() {
            Some("count") => {
                count = Some(
                    it.next()
                        .and_then(|t| t.parse::<usize>().ok())
                        .ok_or_else(|| Error::file(path, "bad count line"))?,
                )
            }
            Some("sh_degree") => {
                degree = Some(
                    it.next()
                        .and_then(|t| t.parse::<usize>().ok())
                        .ok_or_else(|| Error::file(path, "bad sh_degree line"))?,
                )
            }
            Some("aabb") => {
                let v: Vec<f64> = it.filter_map(|t| t.parse().ok()).collect();
                if v.len() != 6 {
                    return Err(Error::file(path, "bad aabb line"));
                }
                aabb = Some(Aabb::new(
                    Vector3::new(v[0], v[1], v[2]),
                    Vector3::new(v[3], v[4], v[5]),
                ));
            }
            _ => return Err(Error::file(path, format!("unknown header line: {l}"))),
        }
    }
    let count = count.ok_or_else(|| Error::file(path, "missing count"))?;
    let degree = degree.ok_or_else(|| Error::file(path, "missing sh_degree"))?;
    if degree > 3 {
        return Err(Error::UnsupportedShCount(degree));
    }
    let aabb = aabb.ok_or_else(|| Error::file(path, "missing aabb"))?;
    let k = (degree + 1) * (degree + 1);
    let rec_len = (11 + 3 * k) * 4;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != count * rec_len {
        return Err(Error::file(
            path,
            format!("expected {} record bytes, found {}", count * rec_len, raw.len()),
        ));
    }
    let mut gaussians = Vec::with_capacity(count);
    for rec in raw.chunks_exact(rec_len) {
        let mut vals = rec
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let mut next = || vals.next().unwrap();
        let position = Vector3::new(next(), next(), next());
        let log_scale = Vector3::new(next(), next(), next());
        let rotation = Vector4::new(next(), next(), next(), next());
        let opacity_logit = next();
        let sh = (0..k).map(|_| [next(), next(), next()]).collect();
        gaussians.push(Gaussian { position, log_scale, rotation, sh, opacity_logit });
    }
    let mut cloud = GaussianCloud { gaussians, scene_aabb: aabb };
    let moved = cloud.clamp_to_aabb();
    if moved > 0 {
        log::warn!("{}: clamped {} positions into the scene box", path.display(), moved);
    }
    Ok(cloud)
}
