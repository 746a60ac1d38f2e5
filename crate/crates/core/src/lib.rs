//! CPU-based differentiable Gaussian splatting for deformable scenes.
//!
//! The crate reconstructs a time-varying scene from a single-viewpoint image
//! sequence with depth maps and occlusion masks. A canonical set of 3D
//! Gaussians is deformed per timestep by a factorized space-time feature
//! field, rendered with a tile-binned software rasterizer, and optimized
//! against masked photometric, depth, total-variation, and surface-alignment
//! objectives. Every differentiable path has an analytic backward pass that
//! is checked against central finite differences in the test suite.
//!
//! With the default `parallel` feature the inner loops (projection, tile
//! rasterization, per-Gaussian deformation, SDF sampling) run on rayon.
//! Reductions use fixed chunk decompositions merged in order, so results are
//! bit-identical for any thread count, including the sequential fallback
//! built with `--no-default-features`.

pub mod camera;
pub mod deform;
pub mod dataset;
pub mod deform_grad;
mod error;
pub mod gauss;
pub mod img;
pub mod loss;
pub mod metrics;
pub(crate) mod parallel;
pub mod project;
pub mod render;
pub mod render_grad;
pub mod sh;
pub mod train;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

/// Builds the global worker pool used by all data-parallel loops.
///
/// A no-op in sequential builds. Calling it twice is harmless; the second
/// call is ignored.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}
