//! Motion masks from render residuals, fused with ingested segmentation masks.
//!
//! Masks use 1 = dynamic throughout.

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud, SE3Pose};
use crate::raster::{Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RobustKernel {
    GemanMcClure,
}

impl RobustKernel {
    /// ρ(u, σ), bounded in [0, 1).
    pub fn rho(&self, u: f64, sigma: f64) -> f64 {
        match self {
            RobustKernel::GemanMcClure => {
                let u2 = u * u;
                u2 / (u2 + sigma * sigma)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingParams {
    pub rho: RobustKernel,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_steps: usize,
    /// Target mean of ρ for the scale estimate; 0.5 is the maximum-breakdown choice.
    pub breakdown: f64,
    pub kappa: f64,
    pub morph_open_radius: usize,
}

impl Default for MaskingParams {
    fn default() -> Self {
        Self {
            rho: RobustKernel::GemanMcClure,
            sigma_min: 1e-3,
            sigma_max: 10.0,
            sigma_steps: 64,
            breakdown: 0.5,
            kappa: 3.0,
            morph_open_radius: 1,
        }
    }
}

impl MaskingParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.sigma_min > 0.0)
            || !(self.sigma_max > self.sigma_min)
            || !self.sigma_max.is_finite()
        {
            return bad("sigma_min", "sigma range must satisfy 0 < min < max");
        }
        if self.sigma_steps < 2 {
            return bad("sigma_steps", "need at least 2 grid points");
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return bad("kappa", "must be positive");
        }
        if !(self.breakdown > 0.0 && self.breakdown < 1.0) {
            return bad("breakdown", "must lie in (0, 1)");
        }
        Ok(())
    }

    /// Log-spaced σ grid, ascending.
    pub fn sigma_grid(&self) -> Vec<f64> {
        let (a, b) = (self.sigma_min.max(1e-6).ln(), self.sigma_max.ln());
        let n = self.sigma_steps;
        (0..n)
            .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
            .collect()
    }

    /// Ratio between neighbouring grid values.
    pub fn grid_step(&self) -> f64 {
        (self.sigma_max / self.sigma_min.max(1e-6)).powf(1.0 / (self.sigma_steps - 1) as f64)
    }
}

/// Explicit, implicit and fused masks for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    explicit: Mask,
    implicit: Mask,
    refined: Mask,
}

impl MaskSet {
    pub fn new(explicit: Mask, implicit: Mask) -> Result<Self> {
        let refined = fuse_masks(&explicit, &implicit)?;
        Ok(Self {
            explicit,
            implicit,
            refined,
        })
    }

    /// Before any render exists the explicit mask stands in for both.
    pub fn bootstrap(explicit: Mask) -> Self {
        Self {
            implicit: explicit.clone(),
            refined: explicit.clone(),
            explicit,
        }
    }

    pub fn explicit(&self) -> &Mask {
        &self.explicit
    }

    pub fn implicit(&self) -> &Mask {
        &self.implicit
    }

    pub fn refined(&self) -> &Mask {
        &self.refined
    }
}

/// Mean robust cost of `u` at scale `sigma`.
pub fn mean_rho(u: &Image, sigma: f64, kernel: RobustKernel) -> f64 {
    let n = u.data().len().max(1);
    u.data().iter().map(|&v| kernel.rho(v, sigma)).sum::<f64>() / n as f64
}

/// Robust scale of the residual map.
///
/// Returns the smallest grid σ whose mean robust cost is at most
/// `params.breakdown`. The mean cost falls monotonically in σ, so this is the
/// grid M-estimate of scale; an all-zero map yields the grid minimum.
pub fn fit_sigma(u: &Image, params: &MaskingParams) -> f64 {
    let grid = params.sigma_grid();
    let floor = params.sigma_min.max(1e-6);
    for &s in &grid {
        if mean_rho(u, s, params.rho) <= params.breakdown {
            return s.max(floor);
        }
    }
    *grid.last().expect("grid has at least two points")
}

/// Pixels with residual above `kappa · sigma`, then opened to drop speckle.
pub fn implicit_mask(u: &Image, sigma: f64, params: &MaskingParams) -> Mask {
    let raw = threshold_mask(u, sigma, params.kappa);
    opening(&raw, params.morph_open_radius)
}

/// Thresholding without morphology.
pub fn threshold_mask(u: &Image, sigma: f64, kappa: f64) -> Mask {
    let t = kappa * sigma;
    Mask::from_vec(
        u.width(),
        u.height(),
        u.data().iter().map(|&v| v > t).collect(),
    )
    .expect("sizes agree")
}

/// Square-element erosion. Pixels outside the image count as set.
pub fn erode(m: &Mask, radius: usize) -> Mask {
    morph(m, radius, true)
}

/// Square-element dilation. Pixels outside the image count as unset.
pub fn dilate(m: &Mask, radius: usize) -> Mask {
    morph(m, radius, false)
}

pub fn opening(m: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return m.clone();
    }
    dilate(&erode(m, radius), radius)
}

fn morph(m: &Mask, radius: usize, erode: bool) -> Mask {
    let (w, h) = (m.width(), m.height());
    let r = radius as isize;
    let mut out = Mask::new(w, h);
    for row in 0..h as isize {
        for col in 0..w as isize {
            let mut v = erode;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let (c, rr) = (col + dx, row + dy);
                    if c < 0 || rr < 0 || c >= w as isize || rr >= h as isize {
                        continue;
                    }
                    let s = m.get(c as usize, rr as usize);
                    if erode && !s {
                        v = false;
                        break 'win;
                    }
                    if !erode && s {
                        v = true;
                        break 'win;
                    }
                }
            }
            out.set(col as usize, row as usize, v);
        }
    }
    out
}

/// Elementwise AND of dynamic masks.
pub fn fuse_masks(explicit: &Mask, implicit: &Mask) -> Result<Mask> {
    explicit.zip_with(implicit, |a, b| a && b)
}

/// Per-point static flags (`true` = static) for world-frame `points` seen
/// from the camera-to-world `pose`.
///
/// A point is dynamic only if it projects inside the image onto a set pixel.
pub fn lift_mask_to_points(
    mask: &Mask,
    points: &PointCloud,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
) -> Vec<bool> {
    let sized = mask.same_size(k.width, k.height);
    points
        .points
        .iter()
        .map(|p| match k.pixel_of_point(&pose.apply_inverse(p)) {
            Some((c, r)) if sized => !mask.get(c, r),
            _ => true,
        })
        .collect()
}
