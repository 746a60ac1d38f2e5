//! Shared helpers for unit tests.

use nalgebra::{Vector3, Vector4};
use rand::rngs::StdRng;
use rand::Rng;

use crate::camera::Camera;
use crate::gauss::{Aabb, Gaussian, GaussianCloud};

/// Identity-pose square camera with the principal point at the center.
pub(crate) fn test_camera(side: usize) -> Camera {
    let c = side as f64 / 2.0;
    Camera::identity_pose(50.0, 50.0, c, c, side, side)
}

pub(crate) fn cloud_of(gaussians: Vec<Gaussian>) -> GaussianCloud {
    GaussianCloud {
        gaussians,
        scene_aabb: Aabb::new(Vector3::new(-5.0, -5.0, -5.0), Vector3::new(5.0, 5.0, 5.0)),
    }
}

/// Random cloud in front of an identity-pose camera.
pub(crate) fn random_cloud(rng: &mut StdRng, n: usize, degree: usize) -> GaussianCloud {
    let k = (degree + 1) * (degree + 1);
    let gaussians = (0..n)
        .map(|_| Gaussian {
            position: Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(1.2..3.0),
            ),
            log_scale: Vector3::new(
                rng.gen_range(-4.0..-2.0),
                rng.gen_range(-4.0..-2.0),
                rng.gen_range(-4.0..-2.0),
            ),
            rotation: Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            sh: (0..k)
                .map(|i| {
                    let s = if i == 0 { 0.8 } else { 0.15 };
                    [rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s)]
                })
                .collect(),
            opacity_logit: rng.gen_range(-2.0..2.5),
        })
        .collect();
    cloud_of(gaussians)
}
