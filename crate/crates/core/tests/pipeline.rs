mod common;

use std::sync::Arc;

use common::*;
use gsslam::gaussian_map::{assign_submap, SubmapWorld};
use gsslam::geometry::{PointCloud, SE3Pose, Vec3};
use gsslam::io::{FixtureParams, FixtureScene};
use gsslam::pipeline::{map_step, FrameBundle, Keyframe, PipelineConfig, SlamState};
use gsslam::raster::{LabelMap, Mask};
use gsslam::rasterizer::{render_with, RenderSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A keyframe whose assets are a render of `truth` at the identity pose.
fn synthetic_keyframe(truth: &[gsslam::gaussian_map::Gaussian], w: usize, h: usize) -> Keyframe {
    let k = camera(w, h);
    let out = render_with(
        truth,
        &SE3Pose::identity(),
        &k,
        &RenderSettings::default(),
        NUM_CLASSES,
        FEATURE_DIM,
    );
    let frame = FrameBundle {
        index: 0,
        timestamp: 0.0,
        image: out.color.clone(),
        scan: PointCloud::new(truth.iter().map(|g| g.position).collect()),
        dense_depth: out.depth.clone(),
        semantic_labels: LabelMap::from_vec(w, h, out.semantic_argmax()).unwrap(),
        num_classes: NUM_CLASSES,
        features: out.feature.clone(),
        explicit_mask: Mask::new(w, h),
        gt_pose: None,
        gt_motion_mask: None,
    };
    Keyframe {
        frame: Arc::new(frame),
        pose: SE3Pose::identity(),
        refined_mask: Mask::new(w, h),
    }
}

fn perturbed(
    truth: &[gsslam::gaussian_map::Gaussian],
    rng: &mut ChaCha8Rng,
) -> Vec<gsslam::gaussian_map::Gaussian> {
    truth
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.position += Vec3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            );
            g.color = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            g.log_scale
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.3..0.3));
            g.feature
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-1.0..1.0));
            g
        })
        .collect()
}

#[test]
fn mapping_halves_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth = random_scene(&mut rng, 10, (1.0, 3.0));
    let kf = synthetic_keyframe(&truth, 48, 40);
    let mut world = SubmapWorld::new();
    assign_submap(&mut world, &SE3Pose::identity(), 50.0).insert(perturbed(&truth, &mut rng));
    let config = PipelineConfig::default();
    let k = camera(48, 40);
    let log = map_step(
        &mut world,
        &[kf],
        &k,
        &RenderSettings::default(),
        &config,
        200,
    )
    .unwrap();
    assert_eq!(log.len(), 200);
    let (first, last) = (log[0].1.total, log[199].1.total);
    assert!(last <= 0.5 * first, "loss {first:.4} -> {last:.4}");
}

#[test]
fn zero_iterations_and_frozen_submaps_are_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let near = random_scene(&mut rng, 8, (0.0, 2.0));
    let mut far = random_scene(&mut rng, 8, (0.0, 2.0));
    for g in &mut far {
        g.position.z += 10.0;
    }
    let kf = synthetic_keyframe(&[near.clone(), far.clone()].concat(), 32, 24);
    let k = camera(32, 24);
    let config = PipelineConfig::default();

    let mut world = SubmapWorld::new();
    assign_submap(&mut world, &SE3Pose::identity(), 10.0).insert(perturbed(&near, &mut rng));
    assign_submap(
        &mut world,
        &SE3Pose::from_translation(Vec3::new(0.0, 0.0, 20.0)),
        10.0,
    )
    .insert(perturbed(&far, &mut rng));
    assert_eq!(world.active_index(), Some(1));
    let frozen_before = world.submaps()[0].gaussians().to_vec();
    let active_before = world.submaps()[1].gaussians().to_vec();

    let log = map_step(
        &mut world,
        &[kf.clone()],
        &k,
        &RenderSettings::default(),
        &config,
        0,
    )
    .unwrap();
    assert!(log.is_empty());
    assert_eq!(world.submaps()[0].gaussians(), &frozen_before[..]);
    assert_eq!(world.submaps()[1].gaussians(), &active_before[..]);

    map_step(
        &mut world,
        &[kf],
        &k,
        &RenderSettings::default(),
        &config,
        20,
    )
    .unwrap();
    assert_eq!(world.submaps()[0].gaussians(), &frozen_before[..]);
    assert_ne!(world.submaps()[1].gaussians(), &active_before[..]);
}

fn slam_for(scene: &FixtureScene, config: PipelineConfig) -> SlamState {
    let c = scene.calibration();
    SlamState::new(config, c.camera, c.t_cam_lidar).unwrap()
}

#[test]
fn bootstrap_and_non_keyframes() {
    let scene = FixtureScene::new(FixtureParams {
        frames: 3,
        ..Default::default()
    });
    let config = PipelineConfig {
        keyframe_interval: 5,
        keyframe_translation: 100.0,
        ..PipelineConfig::default()
    };
    let mut slam = slam_for(&scene, config);
    let r0 = slam.process_frame(scene.frame(0)).unwrap();
    assert!(r0.keyframe);
    assert_eq!(r0.pose, SE3Pose::identity());
    let active = slam.world.active().unwrap();
    assert_eq!(active.origin, Vec3::zeros());
    let count = slam.world.gaussian_count();
    assert!(count > 0);
    for k in 1..3 {
        let r = slam.process_frame(scene.frame(k)).unwrap();
        assert!(!r.keyframe);
        assert_eq!(slam.trajectory().len(), k + 1);
        assert_eq!(slam.world.gaussian_count(), count);
    }
}

#[test]
fn stationary_frame_keeps_its_pose() {
    let scene = FixtureScene::new(FixtureParams {
        frames: 1,
        ..Default::default()
    });
    let mut slam = slam_for(&scene, PipelineConfig::default());
    slam.process_frame(scene.frame(0)).unwrap();
    let mut again = scene.frame(0);
    again.index = 1;
    again.timestamp = 0.1;
    let r = slam.process_frame(again).unwrap();
    let (dt, da) = (
        r.pose.distance_to(&SE3Pose::identity()),
        r.pose.angle_to(&SE3Pose::identity()).to_degrees(),
    );
    assert!(dt < 1e-3 && da < 0.05, "moved {dt:.2e} m / {da:.2e}°");
}

#[test]
fn constant_speed_drive_is_tracked() {
    let scene = FixtureScene::new(FixtureParams {
        frames: 10,
        straight: true,
        pillars: true,
        ..Default::default()
    });
    let config = PipelineConfig::parse(include_str!("../../../configs/tunnel.cfg")).unwrap();
    let mut slam = slam_for(&scene, config);
    let mut errors = Vec::new();
    for k in 0..10 {
        let r = slam.process_frame(scene.frame(k)).unwrap();
        errors.push(r.pose.distance_to(&scene.gt_pose(k)));
    }
    assert!(
        errors.iter().all(|e| *e < 0.05),
        "per-frame errors {errors:.3?}"
    );
}

#[test]
fn masking_is_inert_on_a_static_scene() {
    let scene = FixtureScene::new(FixtureParams {
        frames: 4,
        ..Default::default()
    });
    let run = |dynamic_masking: bool| {
        let mut slam = slam_for(
            &scene,
            PipelineConfig {
                dynamic_masking,
                ..PipelineConfig::default()
            },
        );
        for k in 0..4 {
            let mut f = scene.frame(k);
            f.explicit_mask = Mask::new(f.width(), f.height());
            slam.process_frame(f).unwrap();
        }
        (slam.trajectory().to_vec(), slam.world.gaussian_count())
    };
    assert_eq!(run(true), run(false));
}
