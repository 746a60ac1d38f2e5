//! Pinhole camera model with a rigid world-to-camera transform.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Intrinsics plus extrinsics. The camera looks down +z in its own frame;
/// a world point maps to pixels via `p_cam = R p + t`, `u = fx x/z + cx`,
/// `v = fy y/z + cy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    /// Row-major 4x4 rigid transform from world to camera coordinates.
    pub world_to_camera: [f64; 16],
}

impl Camera {
    /// Checks intrinsics and that the rotation block is orthonormal.
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image dimensions must be nonzero".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidCamera(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        for v in &self.world_to_camera {
            if !v.is_finite() {
                return Err(Error::InvalidCamera("non-finite transform entry".into()));
            }
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "rotation block not orthonormal (deviation {err:.2e})"
            )));
        }
        let bottom_ok = self.world_to_camera[12] == 0.0
            && self.world_to_camera[13] == 0.0
            && self.world_to_camera[14] == 0.0
            && self.world_to_camera[15] == 1.0;
        if !bottom_ok {
            return Err(Error::InvalidCamera("last transform row must be (0,0,0,1)".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let m = &self.world_to_camera;
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10])
    }

    pub fn translation(&self) -> Vector3<f64> {
        let m = &self.world_to_camera;
        Vector3::new(m[3], m[7], m[11])
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_row_slice(&self.world_to_camera)
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p_world + self.translation()
    }

    /// Camera-space point to pixel coordinates (no bounds check).
    pub fn project_camera_point(&self, p_cam: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Camera position in world coordinates: -Rᵀ t.
    pub fn center_world(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Unit view direction from the camera center toward a world point.
    pub fn view_direction(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        let d = p_world - self.center_world();
        let n = d.norm();
        if n > 0.0 {
            d / n
        } else {
            Vector3::new(0.0, 0.0, 1.0)
        }
    }

    /// Back-projects pixel (u, v) at camera depth z to world coordinates.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let p_cam = Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z);
        self.rotation().transpose() * (p_cam - self.translation())
    }

    /// An identity-pose camera at the world origin looking down +z.
    pub fn identity_pose(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near: 0.01,
            far: 100.0,
            world_to_camera: [
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        }
    }

    /// Replaces the pose with the given rotation and translation.
    pub fn with_pose(mut self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let m = &mut self.world_to_camera;
        for i in 0..3 {
            for j in 0..3 {
                m[i * 4 + j] = r[(i, j)];
            }
            m[i * 4 + 3] = t[i];
        }
        m[12] = 0.0;
        m[13] = 0.0;
        m[14] = 0.0;
        m[15] = 1.0;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_camera() -> Camera {
        Camera::identity_pose(100.0, 120.0, 32.0, 24.0, 64, 48)
    }

    #[test]
    fn validate_accepts_identity_pose() {
        test_camera().validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_intrinsics() {
        let mut c = test_camera();
        c.fx = -1.0;
        assert!(matches!(c.validate(), Err(Error::InvalidCamera(_))));
        let mut c = test_camera();
        c.near = 2.0;
        c.far = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn validate_rejects_sheared_rotation() {
        let mut c = test_camera();
        c.world_to_camera[1] = 0.01;
        assert!(c.validate().is_err());
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let c = test_camera();
        let (u, v) = c.project_camera_point(&Vector3::new(0.0, 0.0, 3.7));
        assert_eq!(u, 32.0);
        assert_eq!(v, 24.0);
    }

    #[test]
    fn unproject_inverts_projection() {
        let angle = 0.4f64;
        let r = Matrix3::new(
            angle.cos(), 0.0, angle.sin(),
            0.0, 1.0, 0.0,
            -angle.sin(), 0.0, angle.cos(),
        );
        let c = test_camera().with_pose(&r, &Vector3::new(0.2, -0.1, 0.5));
        c.validate().unwrap();
        let p = Vector3::new(0.3, 0.2, 2.0);
        let p_cam = c.to_camera(&p);
        let (u, v) = c.project_camera_point(&p_cam);
        let back = c.unproject(u, v, p_cam.z);
        assert_relative_eq!(back, p, epsilon = 1e-12);
    }

    #[test]
    fn center_and_view_direction() {
        let c = test_camera();
        assert_eq!(c.center_world(), Vector3::zeros());
        let d = c.view_direction(&Vector3::new(0.0, 0.0, 5.0));
        assert_relative_eq!(d, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }
}
