//! Perspective projection of 3D Gaussians to screen-space 2D Gaussians.
//!
//! The world covariance is pushed through the camera rotation and the
//! first-order Jacobian of the pinhole projection, then a small isotropic
//! low-pass term is added so every splat covers at least a pixel or so.

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};

use crate::camera::Camera;

/// Isotropic screen-space variance added to every projected covariance.
pub const LOWPASS: f64 = 0.3;

/// A Gaussian after projection, in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel-space mean (u, v).
    pub mean: Vector2<f64>,
    /// 2x2 screen-space covariance including the low-pass term.
    pub cov: Matrix2<f64>,
    /// Inverse of `cov`.
    pub conic: Matrix2<f64>,
    /// Camera-space depth of the mean.
    pub depth: f64,
    /// 3-sigma footprint radius in pixels, rounded up.
    pub radius: i64,
    /// Inclusive pixel box touched by the splat, clamped to the image.
    /// Empty boxes (fully off-screen splats) never reach the rasterizer.
    pub x_lo: i64,
    pub x_hi: i64,
    pub y_lo: i64,
    pub y_hi: i64,
}

impl ProjectedGaussian {
    /// The shared contribution predicate: a pixel receives this splat
    /// exactly when it lies inside the integer box.
    #[inline]
    pub fn covers(&self, px: i64, py: i64) -> bool {
        px >= self.x_lo && px <= self.x_hi && py >= self.y_lo && py <= self.y_hi
    }
}

fn perspective_jacobian(camera: &Camera, p_cam: &Vector3<f64>) -> Matrix3x2<f64> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let inv_z = 1.0 / z;
    let inv_z2 = inv_z * inv_z;
    // Stored transposed (3x2) so columns are gradients of u and v.
    Matrix3x2::new(
        camera.fx * inv_z, 0.0,
        0.0, camera.fy * inv_z,
        -camera.fx * x * inv_z2, -camera.fy * y * inv_z2,
    )
}

/// Projects one Gaussian. Returns `None` when the mean is outside the depth
/// range or the 3-sigma box misses the image entirely.
pub fn project_gaussian(
    camera: &Camera,
    position: &Vector3<f64>,
    cov_world: &Matrix3<f64>,
) -> Option<ProjectedGaussian> {
    let p_cam = camera.to_camera(position);
    if !(p_cam.z > camera.near && p_cam.z < camera.far) {
        return None;
    }
    let (u, v) = camera.project_camera_point(&p_cam);
    let r = camera.rotation();
    let cov_cam = r * cov_world * r.transpose();
    let jt = perspective_jacobian(camera, &p_cam);
    let mut cov2 = jt.transpose() * cov_cam * jt;
    cov2[(0, 0)] += LOWPASS;
    cov2[(1, 1)] += LOWPASS;
    cov2[(1, 0)] = cov2[(0, 1)];
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(0, 1)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(0, 1)], cov2[(0, 0)]) / det;
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (3.0 * lambda_max.sqrt()).ceil() as i64;
    let x_lo = (u.floor() as i64 - radius).max(0);
    let x_hi = (u.floor() as i64 + radius).min(camera.width as i64 - 1);
    let y_lo = (v.floor() as i64 - radius).max(0);
    let y_hi = (v.floor() as i64 + radius).min(camera.height as i64 - 1);
    if x_lo > x_hi || y_lo > y_hi {
        return None;
    }
    Some(ProjectedGaussian {
        mean: Vector2::new(u, v),
        cov: cov2,
        conic,
        depth: p_cam.z,
        radius,
        x_lo,
        x_hi,
        y_lo,
        y_hi,
    })
}

/// Backward of [`project_gaussian`]: combines gradients w.r.t. the pixel
/// mean, the screen covariance, and the depth into gradients of the world
/// position and world covariance.
pub fn project_backward(
    camera: &Camera,
    position: &Vector3<f64>,
    cov_world: &Matrix3<f64>,
    d_mean: &Vector2<f64>,
    d_cov2: &Matrix2<f64>,
    d_depth: f64,
) -> (Vector3<f64>, Matrix3<f64>) {
    let p_cam = camera.to_camera(position);
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let inv_z = 1.0 / z;
    let inv_z2 = inv_z * inv_z;
    let r = camera.rotation();
    let cov_cam = r * cov_world * r.transpose();
    let jt = perspective_jacobian(camera, &p_cam);

    // Mean and depth paths.
    let mut d_p_cam = jt * d_mean;
    d_p_cam.z += d_depth;

    // Covariance path: cov2 = J cov_cam Jᵀ (J = jtᵀ). The forward mirrors
    // the (1,0) entry from (0,1), so that gradient folds into (0,1).
    let g = Matrix2::new(
        d_cov2[(0, 0)],
        d_cov2[(0, 1)] + d_cov2[(1, 0)],
        0.0,
        d_cov2[(1, 1)],
    );
    let d_cov_cam = jt * g * jt.transpose();
    // dL/dJ = G J Aᵀ + Gᵀ J A with A = cov_cam, on the transposed storage.
    let d_jt = cov_cam * jt * g.transpose() + cov_cam.transpose() * jt * g;
    // J entries that depend on p_cam: J00 = fx/z, J02 = -fx x/z^2,
    // J11 = fy/z, J12 = -fy y/z^2.
    let (fx, fy) = (camera.fx, camera.fy);
    d_p_cam.x += d_jt[(2, 0)] * (-fx * inv_z2);
    d_p_cam.y += d_jt[(2, 1)] * (-fy * inv_z2);
    d_p_cam.z += d_jt[(0, 0)] * (-fx * inv_z2)
        + d_jt[(1, 1)] * (-fy * inv_z2)
        + d_jt[(2, 0)] * (2.0 * fx * x * inv_z2 * inv_z)
        + d_jt[(2, 1)] * (2.0 * fy * y * inv_z2 * inv_z);

    let d_position = r.transpose() * d_p_cam;
    let d_cov_world = r.transpose() * d_cov_cam * r;
    (d_position, d_cov_world)
}

/// Backward through the conic (inverse 2x2 covariance): maps dL/dconic to
/// dL/dcov.
pub fn conic_backward(conic: &Matrix2<f64>, d_conic: &Matrix2<f64>) -> Matrix2<f64> {
    -(conic * d_conic * conic)
}
