//! Run configuration and its `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::path::Path;

use crate::dynamic_masking::MaskingParams;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, UncertaintyWeights};
use crate::registration::{IcpSettings, VoxelMapParams};

/// Adam step sizes, one per Gaussian attribute plus the two pose blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub semantic: f64,
    pub feature: f64,
    pub pose_translation: f64,
    pub pose_rotation: f64,
    /// Pose rates decay geometrically to this fraction over the tracking iterations.
    pub pose_decay: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 2e-3,
            log_scale: 5e-3,
            rotation: 2e-3,
            opacity: 0.05,
            color: 0.02,
            semantic: 0.05,
            feature: 0.02,
            pose_translation: 0.1,
            pose_rotation: 2e-3,
            pose_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub weights: LossWeights,
    pub uncertainty: UncertaintyWeights,
    pub masking: MaskingParams,
    pub dynamic_masking: bool,
    /// When false the loss keeps only the colour and depth terms.
    pub hier_losses: bool,
    pub tracking_iterations: usize,
    /// Pixels whose rendered alpha is below this are left out of tracking.
    pub track_alpha_min: f64,
    pub mapping_iterations: usize,
    pub mapping_window: usize,
    pub keyframe_interval: usize,
    pub keyframe_translation: f64,
    pub submap_extent: f64,
    pub prune_interval: usize,
    pub opacity_min: f64,
    pub voxel: VoxelMapParams,
    pub icp: IcpSettings,
    pub initial_threshold: f64,
    pub min_motion: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Voxel size for thinning the scan before seeding Gaussians.
    pub init_voxel: f64,
    /// Seeded Gaussian radius in pixels at the point's depth.
    pub init_scale_factor: f64,
    /// On later keyframes a LiDAR point seeds a Gaussian only where the current
    /// render's alpha is below this or its depth is more than 10% off.
    pub seed_alpha_max: f64,
    pub lr: LearningRates,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            uncertainty: UncertaintyWeights::default(),
            masking: MaskingParams::default(),
            dynamic_masking: true,
            hier_losses: true,
            tracking_iterations: 30,
            track_alpha_min: 0.5,
            mapping_iterations: 100,
            mapping_window: 5,
            keyframe_interval: 5,
            keyframe_translation: 2.0,
            submap_extent: 50.0,
            prune_interval: 50,
            opacity_min: 0.05,
            voxel: VoxelMapParams::default(),
            icp: IcpSettings::default(),
            initial_threshold: 2.0,
            min_motion: 0.1,
            min_range: 0.5,
            max_range: 100.0,
            init_voxel: 0.1,
            init_scale_factor: 1.0,
            seed_alpha_max: 0.5,
            lr: LearningRates::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Loss weights actually used, after the hierarchical-loss switch.
    pub fn effective_weights(&self) -> LossWeights {
        if self.hier_losses {
            self.weights
        } else {
            self.weights.color_depth_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.masking.validate()?;
        let positive_count = [
            ("mapping_window", self.mapping_window),
            ("keyframe_interval", self.keyframe_interval),
            ("prune_interval", self.prune_interval),
            ("max_points_per_voxel", self.voxel.max_points_per_voxel),
            ("icp_max_iterations", self.icp.max_iterations),
        ];
        for (key, v) in positive_count {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "must be at least 1".into(),
                });
            }
        }
        let positive = [
            ("submap_extent", self.submap_extent),
            ("voxel_size", self.voxel.voxel_size),
            ("map_range", self.voxel.map_range),
            ("initial_threshold", self.initial_threshold),
            ("max_range", self.max_range),
            ("init_voxel", self.init_voxel),
            ("init_scale_factor", self.init_scale_factor),
            ("seed_alpha_max", self.seed_alpha_max),
            ("keyframe_translation", self.keyframe_translation),
            ("lr_pose_decay", self.lr.pose_decay),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config {
                    key: key.into(),
                    msg: format!("must be positive, got {v}"),
                });
            }
        }
        if !(self.min_range >= 0.0 && self.min_range < self.max_range) {
            return Err(Error::Config {
                key: "min_range".into(),
                msg: "must satisfy 0 <= min_range < max_range".into(),
            });
        }
        Ok(())
    }

    /// Parses a config file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    key: line.to_string(),
                    msg: format!("line {} is not `key = value`", n + 1),
                });
            };
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config {
                key: key.into(),
                msg: format!("cannot parse {value:?}"),
            })
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config {
                    key: key.into(),
                    msg: format!("expected a boolean, got {value:?}"),
                }),
            }
        }
        match key {
            "lambda_s" => self.weights.lambda_s = num(key, value)?,
            "lambda_dino" => self.weights.lambda_dino = num(key, value)?,
            "lambda_c" => self.weights.lambda_c = num(key, value)?,
            "lambda_depth" => self.weights.lambda_depth = num(key, value)?,
            "uncertainty_lambda_dino" => self.uncertainty.lambda_dino = num(key, value)?,
            "uncertainty_lambda_depth" => self.uncertainty.lambda_depth = num(key, value)?,
            "sigma_min" => self.masking.sigma_min = num(key, value)?,
            "sigma_max" => self.masking.sigma_max = num(key, value)?,
            "sigma_steps" => self.masking.sigma_steps = num(key, value)?,
            "breakdown" => self.masking.breakdown = num(key, value)?,
            "kappa" => self.masking.kappa = num(key, value)?,
            "morph_open_radius" => self.masking.morph_open_radius = num(key, value)?,
            "dynamic_masking" => self.dynamic_masking = flag(key, value)?,
            "hier_losses" => self.hier_losses = flag(key, value)?,
            "tracking_iterations" => self.tracking_iterations = num(key, value)?,
            "track_alpha_min" => self.track_alpha_min = num(key, value)?,
            "mapping_iterations" => self.mapping_iterations = num(key, value)?,
            "mapping_window" => self.mapping_window = num(key, value)?,
            "keyframe_interval" => self.keyframe_interval = num(key, value)?,
            "keyframe_translation" => self.keyframe_translation = num(key, value)?,
            "submap_extent" => self.submap_extent = num(key, value)?,
            "prune_interval" => self.prune_interval = num(key, value)?,
            "opacity_min" => self.opacity_min = num(key, value)?,
            "voxel_size" => self.voxel.voxel_size = num(key, value)?,
            "max_points_per_voxel" => self.voxel.max_points_per_voxel = num(key, value)?,
            "map_range" => self.voxel.map_range = num(key, value)?,
            "icp_max_iterations" => self.icp.max_iterations = num(key, value)?,
            "icp_convergence" => self.icp.convergence = num(key, value)?,
            "initial_threshold" => self.initial_threshold = num(key, value)?,
            "min_motion" => self.min_motion = num(key, value)?,
            "min_range" => self.min_range = num(key, value)?,
            "max_range" => self.max_range = num(key, value)?,
            "init_voxel" => self.init_voxel = num(key, value)?,
            "init_scale_factor" => self.init_scale_factor = num(key, value)?,
            "seed_alpha_max" => self.seed_alpha_max = num(key, value)?,
            "lr_position" => self.lr.position = num(key, value)?,
            "lr_log_scale" => self.lr.log_scale = num(key, value)?,
            "lr_rotation" => self.lr.rotation = num(key, value)?,
            "lr_opacity" => self.lr.opacity = num(key, value)?,
            "lr_color" => self.lr.color = num(key, value)?,
            "lr_semantic" => self.lr.semantic = num(key, value)?,
            "lr_feature" => self.lr.feature = num(key, value)?,
            "lr_pose_translation" => self.lr.pose_translation = num(key, value)?,
            "lr_pose_rotation" => self.lr.pose_rotation = num(key, value)?,
            "lr_pose_decay" => self.lr.pose_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_comments() {
        let c = PipelineConfig::parse(
            "# comment\nkappa = 2.5\n\ntracking_iterations=7 # trailing\nhier_losses = off\n",
        )
        .unwrap();
        assert_eq!(c.masking.kappa, 2.5);
        assert_eq!(c.tracking_iterations, 7);
        assert!(!c.hier_losses);
        assert_eq!(c.effective_weights().lambda_s, 0.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = PipelineConfig::parse("bogus_key = 1").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = PipelineConfig::parse("kappa = fast").unwrap_err();
        assert!(err.to_string().contains("kappa"));
        assert!(PipelineConfig::parse("keyframe_interval = 0").is_err());
    }
}
