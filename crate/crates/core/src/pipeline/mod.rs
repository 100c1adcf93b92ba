//! Frame-by-frame tracking and mapping.
//!
//! Each frame is tracked by descending the rendering loss on the pose, then
//! refined by scan-to-map ICP. The pose is used to render the map, the residual
//! against the frame's feature and depth assets gives a motion mask, and on
//! keyframes the static part of the scan grows the registration map and the
//! Gaussian map before a short mapping optimisation.

mod config;
mod optim;

use std::sync::Arc;

use log::{debug, trace, warn};

pub use config::{LearningRates, PipelineConfig};

use crate::dynamic_masking::{fit_sigma, implicit_mask, lift_mask_to_points, MaskSet};
use crate::error::{Error, Result};
use crate::gaussian_map::{assign_submap, init_from_lidar, prune, Gaussian, SubmapWorld};
use crate::geometry::{CameraIntrinsics, PointCloud, SE3Pose};
use crate::losses::{evaluate, residual_map, LossReport, LossTargets};
use crate::raster::{Image, LabelMap, Mask};
use crate::rasterizer::{render_backward, render_with, RenderOutput, RenderSettings};
use crate::registration::{
    predict_from_history, register_scan_with, update_map, voxel_downsample, AdaptiveThreshold,
    VoxelHashMap,
};
use optim::{step_gaussian, PoseAdam};

/// All assets of one frame.
#[derive(Clone, Debug)]
pub struct FrameBundle {
    pub index: usize,
    pub timestamp: f64,
    pub image: Image,
    /// LiDAR-frame points.
    pub scan: PointCloud,
    /// Metres; 0 marks missing depth.
    pub dense_depth: Image,
    pub semantic_labels: LabelMap,
    pub num_classes: usize,
    pub features: Image,
    pub explicit_mask: Mask,
    pub gt_pose: Option<SE3Pose>,
    pub gt_motion_mask: Option<Mask>,
}

impl FrameBundle {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Checks every raster asset against the camera size.
    pub fn check_dimensions(&self, k: &CameraIntrinsics) -> Result<()> {
        let expect = format!("{}x{}", k.width, k.height);
        let dims = |what: &str, w: usize, h: usize| -> Result<()> {
            if w != k.width || h != k.height {
                return Err(Error::dims(
                    format!("frame {} {what}", self.index),
                    expect.clone(),
                    format!("{w}x{h}"),
                ));
            }
            Ok(())
        };
        dims("image", self.image.width(), self.image.height())?;
        dims(
            "dense depth",
            self.dense_depth.width(),
            self.dense_depth.height(),
        )?;
        dims(
            "semantic labels",
            self.semantic_labels.width(),
            self.semantic_labels.height(),
        )?;
        dims("features", self.features.width(), self.features.height())?;
        dims(
            "explicit mask",
            self.explicit_mask.width(),
            self.explicit_mask.height(),
        )?;
        if let Some(m) = &self.gt_motion_mask {
            dims("motion mask", m.width(), m.height())?;
        }
        if self.image.channels() != 3 {
            return Err(Error::dims(
                format!("frame {} image channels", self.index),
                "3",
                self.image.channels().to_string(),
            ));
        }
        if self.dense_depth.channels() != 1 {
            return Err(Error::dims(
                format!("frame {} depth channels", self.index),
                "1",
                self.dense_depth.channels().to_string(),
            ));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::dims(
                format!("frame {} class count", self.index),
                "1..=255",
                self.num_classes.to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub frame: Arc<FrameBundle>,
    pub pose: SE3Pose,
    pub refined_mask: Mask,
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossLogEntry {
    pub frame: usize,
    pub iteration: usize,
    pub report: LossReport,
}

/// What happened to one frame.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub pose: SE3Pose,
    pub keyframe: bool,
    pub masks: MaskSet,
    /// False when ICP diverged or found no correspondences and the loss prior was kept.
    pub icp_ok: bool,
}

/// Whole SLAM state.
#[derive(Clone, Debug)]
pub struct SlamState {
    config: PipelineConfig,
    camera: CameraIntrinsics,
    t_cam_lidar: SE3Pose,
    settings: RenderSettings,
    pub world: SubmapWorld,
    pub voxel_map: VoxelHashMap,
    pub threshold: AdaptiveThreshold,
    pub keyframes: Vec<Keyframe>,
    trajectory: Vec<SE3Pose>,
    timestamps: Vec<f64>,
    loss_log: Vec<LossLogEntry>,
    last_refined: Option<Mask>,
    frames_since_keyframe: usize,
}

impl SlamState {
    /// `t_cam_lidar` maps LiDAR-frame points into the camera frame.
    pub fn new(
        config: PipelineConfig,
        camera: CameraIntrinsics,
        t_cam_lidar: SE3Pose,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            voxel_map: VoxelHashMap::new(config.voxel),
            threshold: AdaptiveThreshold::new(
                config.initial_threshold,
                config.min_motion,
                config.max_range,
            ),
            config,
            camera,
            t_cam_lidar,
            settings: RenderSettings::default(),
            world: SubmapWorld::new(),
            keyframes: Vec::new(),
            trajectory: Vec::new(),
            timestamps: Vec::new(),
            loss_log: Vec::new(),
            last_refined: None,
            frames_since_keyframe: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.camera
    }

    pub fn render_settings(&self) -> &RenderSettings {
        &self.settings
    }

    /// Camera-to-world poses, one per processed frame.
    pub fn trajectory(&self) -> &[SE3Pose] {
        &self.trajectory
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn loss_log(&self) -> &[LossLogEntry] {
        &self.loss_log
    }

    /// Renders every Gaussian at `pose`.
    pub fn render(&self, pose: &SE3Pose, num_classes: usize, feature_dim: usize) -> RenderOutput {
        let gs = self.world.all_gaussians();
        render_with(
            &gs,
            pose,
            &self.camera,
            &self.settings,
            num_classes,
            feature_dim,
        )
    }

    /// Lifts a LiDAR-frame scan into the camera frame after range clipping.
    fn camera_scan(&self, scan: &PointCloud) -> PointCloud {
        scan.clip_range(self.config.min_range, self.config.max_range)
            .transformed(&self.t_cam_lidar)
    }

    /// Processes the next frame. Asset dimension errors leave the state untouched.
    pub fn process_frame(&mut self, frame: FrameBundle) -> Result<FrameResult> {
        frame.check_dimensions(&self.camera)?;
        if frame.scan.is_empty() {
            return Err(Error::EmptyInput("scan"));
        }
        let frame = Arc::new(frame);
        let scan_cam = self.camera_scan(&frame.scan);
        let voxel = self.config.voxel.voxel_size;
        let map_scan = voxel_downsample(&scan_cam, 0.5 * voxel);
        let reg_scan = voxel_downsample(&map_scan, 1.5 * voxel);
        let bootstrap = self.trajectory.is_empty();
        let (pose, icp_ok, masks) = if bootstrap {
            let masks = if self.config.dynamic_masking {
                MaskSet::bootstrap(frame.explicit_mask.clone())
            } else {
                MaskSet::bootstrap(Mask::new(self.camera.width, self.camera.height))
            };
            (SE3Pose::identity(), true, masks)
        } else {
            let (pose, icp_ok) = self.track(&frame, &reg_scan)?;
            let masks = self.masks_at(&frame, &pose)?;
            (pose, icp_ok, masks)
        };

        let moved = self
            .keyframes
            .last()
            .is_some_and(|kf| kf.pose.distance_to(&pose) > self.config.keyframe_translation);
        let keyframe =
            bootstrap || self.frames_since_keyframe + 1 >= self.config.keyframe_interval || moved;

        if keyframe {
            self.frames_since_keyframe = 0;
            let refined = masks.refined();
            let static_flags =
                lift_mask_to_points(refined, &map_scan, &SE3Pose::identity(), &self.camera);
            update_map(&mut self.voxel_map, &map_scan, &pose, Some(&static_flags));

            let extent = self.config.submap_extent;
            let mut seed_scan = voxel_downsample(&scan_cam, self.config.init_voxel);
            if self.world.gaussian_count() > 0 {
                seed_scan = self.uncovered(&seed_scan, &pose, &frame);
            }
            let seeds = init_from_lidar(
                &seed_scan,
                &pose,
                &self.camera,
                &frame,
                refined,
                self.config.init_scale_factor,
            )?;
            let added = assign_submap(&mut self.world, &pose, extent).insert(seeds);
            debug!(
                "frame {}: keyframe, {} Gaussians seeded",
                frame.index, added
            );

            self.keyframes.push(Keyframe {
                frame: Arc::clone(&frame),
                pose,
                refined_mask: refined.clone(),
            });
            let reports = map_step(
                &mut self.world,
                &self.keyframes,
                &self.camera,
                &self.settings,
                &self.config,
                self.config.mapping_iterations,
            )?;
            self.loss_log
                .extend(reports.into_iter().map(|(iteration, report)| LossLogEntry {
                    frame: frame.index,
                    iteration,
                    report,
                }));
        } else {
            self.frames_since_keyframe += 1;
        }

        self.trajectory.push(pose);
        self.timestamps.push(frame.timestamp);
        self.last_refined = Some(masks.refined().clone());
        Ok(FrameResult {
            pose,
            keyframe,
            masks,
            icp_ok,
        })
    }

    /// Points of a camera-frame scan that the current map does not already explain.
    fn uncovered(&self, scan: &PointCloud, pose: &SE3Pose, frame: &FrameBundle) -> PointCloud {
        let out = self.render(pose, frame.num_classes, frame.features.channels());
        let keep: Vec<bool> = scan
            .points
            .iter()
            .map(|p| match self.camera.pixel_of_point(p) {
                Some((col, row)) => {
                    let i = row * self.camera.width + col;
                    out.alpha.data()[i] < self.config.seed_alpha_max
                        || (out.depth.data()[i] - p.z).abs() > 0.1 * p.z
                }
                None => false,
            })
            .collect();
        scan.select(&keep)
    }

    /// Loss-prior pose optimisation followed by ICP refinement.
    fn track(&mut self, frame: &FrameBundle, reg_scan: &PointCloud) -> Result<(SE3Pose, bool)> {
        let predicted = predict_from_history(&self.trajectory);
        let prior = if self.world.gaussian_count() > 0 && self.config.tracking_iterations > 0 {
            self.optimize_pose(frame, &predicted)?
        } else {
            predicted
        };
        let sigma = self.threshold.threshold();
        if let Some(gt) = &frame.gt_pose {
            debug!(
                "frame {}: predicted error {:.3} m, prior error {:.3} m",
                frame.index,
                predicted.distance_to(gt),
                prior.distance_to(gt)
            );
        }
        let (pose, ok) =
            match register_scan_with(&self.voxel_map, reg_scan, &prior, sigma, &self.config.icp) {
                Ok(r) if r.iterations > 0 || r.converged => (r.pose, true),
                Ok(_) => {
                    warn!(
                        "frame {}: no ICP correspondences, keeping loss prior",
                        frame.index
                    );
                    (prior, false)
                }
                Err(Error::Diverged { iterations }) => {
                    warn!(
                        "frame {}: ICP diverged after {iterations} iterations, keeping loss prior",
                        frame.index
                    );
                    (prior, false)
                }
                Err(Error::EmptyInput(what)) => {
                    warn!("frame {}: ICP skipped, empty {what}", frame.index);
                    (prior, false)
                }
                Err(e) => return Err(e),
            };
        self.threshold.update(&predicted.inverse().compose(&pose));
        Ok((pose, ok))
    }

    /// Adam on the pose tangent over the weighted loss; returns the best pose seen.
    fn optimize_pose(&self, frame: &FrameBundle, init: &SE3Pose) -> Result<SE3Pose> {
        let gs = self.world.all_gaussians();
        let (l, nd) = (frame.num_classes, frame.features.channels());
        let weights = self.config.effective_weights();
        let targets = LossTargets::from_frame(frame);
        let excluded = match &self.last_refined {
            Some(m) => m.clone(),
            None => Mask::new(self.camera.width, self.camera.height),
        };
        let mut opt = PoseAdam::default();
        let mut pose = *init;
        let mut best = (f64::INFINITY, *init);
        let n = self.config.tracking_iterations;
        for it in 0..n {
            let out = render_with(&gs, &pose, &self.camera, &self.settings, l, nd);
            let mut mask = excluded.clone();
            for (m, a) in mask.data_mut().iter_mut().zip(out.alpha.data()) {
                *m |= *a < self.config.track_alpha_min;
            }
            let (report, grads) = match evaluate(&out, &targets, &mask, &weights) {
                Ok(v) => v,
                Err(Error::EmptyPixelSet) => break,
                Err(e) => return Err(e),
            };
            if report.total < best.0 {
                best = (report.total, pose);
            }
            if let Some(gt) = &frame.gt_pose {
                trace!(
                    "track iteration {it}: loss {:.5}, error {:.3} m",
                    report.total,
                    pose.distance_to(gt)
                );
            }
            let g = render_backward(&out, &grads, true)?;
            let scale = self
                .config
                .lr
                .pose_decay
                .powf(it as f64 / (n.max(2) - 1) as f64);
            pose = opt.step(&pose, &g.pose, &self.config.lr, scale);
        }
        Ok(best.1)
    }

    /// Residual-based implicit mask fused with the frame's explicit mask.
    fn masks_at(&self, frame: &FrameBundle, pose: &SE3Pose) -> Result<MaskSet> {
        let (w, h) = (self.camera.width, self.camera.height);
        if !self.config.dynamic_masking {
            return MaskSet::new(Mask::new(w, h), Mask::new(w, h));
        }
        if self.world.gaussian_count() == 0 {
            return Ok(MaskSet::bootstrap(frame.explicit_mask.clone()));
        }
        let out = self.render(pose, frame.num_classes, frame.features.channels());
        let u = residual_map(&out, frame, &self.config.uncertainty)?;
        let sigma = fit_sigma(&u, &self.config.masking);
        let implicit = implicit_mask(&u, sigma, &self.config.masking);
        debug!(
            "frame {}: residual sigma {sigma:.4}, {} implicit pixels",
            frame.index,
            implicit.count()
        );
        MaskSet::new(frame.explicit_mask.clone(), implicit)
    }
}

/// Optimises the active submap against the most recent keyframes.
///
/// Frozen submaps are rendered but never modified. Returns `(iteration, report)`
/// for every iteration that had pixels to fit.
pub fn map_step(
    world: &mut SubmapWorld,
    keyframes: &[Keyframe],
    camera: &CameraIntrinsics,
    settings: &RenderSettings,
    config: &PipelineConfig,
    iterations: usize,
) -> Result<Vec<(usize, LossReport)>> {
    let mut log = Vec::new();
    if iterations == 0 || keyframes.is_empty() {
        return Ok(log);
    }
    let window = &keyframes[keyframes.len().saturating_sub(config.mapping_window)..];
    let weights = config.effective_weights();
    let Some((active, frozen)) = world.split_active() else {
        return Ok(log);
    };
    for it in 0..iterations {
        let kf = &window[it % window.len()];
        let (l, nd) = (kf.frame.num_classes, kf.frame.features.channels());
        let n_active = active.len();
        let out = {
            let all: Vec<&Gaussian> = active
                .gaussians()
                .iter()
                .chain(frozen.iter().copied())
                .collect();
            render_with(&all, &kf.pose, camera, settings, l, nd)
        };
        let (report, grads) = match evaluate(
            &out,
            &LossTargets::from_frame(&kf.frame),
            &kf.refined_mask,
            &weights,
        ) {
            Ok(v) => v,
            Err(Error::EmptyPixelSet) => {
                warn!(
                    "keyframe {}: every pixel masked, skipping mapping iteration",
                    kf.frame.index
                );
                continue;
            }
            Err(e) => return Err(e),
        };
        let g = render_backward(&out, &grads, true)?;
        let (gaussians, moments) = active.params_mut();
        for i in 0..n_active {
            step_gaussian(&mut gaussians[i], &mut moments[i], &g, i, &config.lr);
        }
        if (it + 1) % config.prune_interval == 0 {
            prune(active, config.opacity_min);
        }
        log.push((it, report));
    }
    Ok(log)
}
