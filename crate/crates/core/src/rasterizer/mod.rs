//! Differentiable tile-based Gaussian splatting.
//!
//! [`render`] produces colour, depth, semantic-probability, feature and alpha
//! maps. [`render_backward`] reverses it analytically, producing per-Gaussian
//! gradients and a 6-dof gradient for a right perturbation of the camera pose.
//! Both passes parallelise over 16×16 tiles; per-Gaussian gradients are reduced
//! in fixed tile order, so results do not depend on the thread schedule.

mod backward;
mod forward;
mod project;

pub use backward::{render_backward, OutputGrads, RenderGrads};
pub use forward::{render, render_with, RenderOutput};
pub use project::{project_gaussian, Splat, CHI2_99};

/// Rasterisation constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Contributions with alpha below this are skipped. Zero disables the skip.
    pub min_alpha: f64,
    pub max_alpha: f64,
    /// Compositing stops before transmittance would fall below this. Zero disables it.
    pub transmittance_floor: f64,
    /// Gaussians nearer than this (metres) are culled.
    pub near: f64,
    /// Isotropic low-pass added to every 2D covariance (pixels²).
    pub low_pass: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            min_alpha: 1.0 / 255.0,
            max_alpha: 0.99,
            transmittance_floor: 1e-4,
            near: 0.2,
            low_pass: 0.3,
        }
    }
}

impl RenderSettings {
    /// Settings under which the render is a smooth function of its inputs:
    /// no alpha skip and no early termination.
    pub fn smooth() -> Self {
        Self {
            min_alpha: 0.0,
            transmittance_floor: 0.0,
            ..Self::default()
        }
    }
}
