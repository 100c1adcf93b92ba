//! Ray-cast synthetic dataset: a textured tunnel driven through by a camera
//! and LiDAR rig, optionally with a box moving ahead of it.
//!
//! World axes follow the first camera: x right, y down, z forward. Walls sit
//! at x = ±4, the road at y = 1.5 and the ceiling at y = −3. Colour textures
//! vary quickly along z, while the feature maps vary slowly, so colour alone
//! has many near-equivalent alignments along the tunnel and features do not.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud, SE3Pose, Vec3};
use crate::pipeline::FrameBundle;
use crate::raster::{Image, LabelMap, Mask, IGNORE_LABEL};

use super::{
    write_color, write_depth, write_feature_map, write_labels, write_mask, write_scan,
    write_trajectory, Calibration, DatasetLayout,
};

pub const CLASS_NAMES: [&str; 4] = ["road", "wall", "ceiling", "vehicle"];
const ROAD: u8 = 0;
const WALL: u8 = 1;
const CEILING: u8 = 2;
const VEHICLE: u8 = 3;

const HALF_WIDTH: f64 = 4.0;
const GROUND_Y: f64 = 1.5;
const CEILING_Y: f64 = -3.0;
const MAX_DEPTH: f64 = 80.0;
const LIDAR_RANGE: f64 = 40.0;
const LIDAR_RINGS: usize = 32;
const PILLAR_SPACING: f64 = 2.0;
const PILLAR_DEPTH: f64 = 0.6;

/// Entry distance of a ray into an axis-aligned box.
fn box_entry(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 1e-9).then_some(t0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixtureParams {
    pub frames: usize,
    pub dynamic: bool,
    /// Drive straight down the tunnel axis at 1 m per frame instead of weaving.
    pub straight: bool,
    /// Static pillars along both walls every 2 m, which give registration a
    /// hold along the tunnel axis.
    pub pillars: bool,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            frames: 30,
            dynamic: false,
            straight: false,
            pillars: false,
            seed: 7,
            width: 128,
            height: 80,
            feature_dim: 8,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    point: Vec3,
    class: u8,
    /// Wall side or block-local coordinates.
    local: Vec3,
}

/// The procedural scene behind the fixture.
#[derive(Clone, Debug)]
pub struct FixtureScene {
    pub params: FixtureParams,
    camera: CameraIntrinsics,
    t_cam_lidar: SE3Pose,
}

impl FixtureScene {
    pub fn new(params: FixtureParams) -> Self {
        assert!(
            params.feature_dim >= 5,
            "fixture features need at least 5 channels"
        );
        let (w, h) = (params.width, params.height);
        let f = 80.0 * w as f64 / 128.0;
        let camera = CameraIntrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h)
            .expect("valid intrinsics");
        // LiDAR x forward, y left, z up; mounted 8 cm above and 27 cm behind the camera.
        let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let t_cam_lidar = SE3Pose::from_rotation_matrix(&r, Vec3::new(0.0, -0.08, -0.27));
        Self {
            params,
            camera,
            t_cam_lidar,
        }
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            camera: self.camera,
            t_cam_lidar: self.t_cam_lidar,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            feature_dim: self.params.feature_dim,
        }
    }

    /// Ground-truth camera-to-world pose of frame `k`.
    pub fn gt_pose(&self, k: usize) -> SE3Pose {
        if self.params.straight {
            return SE3Pose::from_translation(Vec3::new(0.0, 0.0, k as f64));
        }
        let z: f64 = (0..k).map(|j| 1.0 + 0.35 * (0.9 * j as f64).sin()).sum();
        let kf = k as f64;
        let x = 0.3 * (0.4 * kf).sin();
        let yaw = 0.04 * (0.3 * kf).sin();
        // Body pitch and roll from the suspension.
        let pitch = 0.015 * (1.3 * kf).sin();
        let roll = 0.01 * (0.7 * kf).sin();
        let r = SE3Pose::from_axis_angle(&Vec3::y(), yaw)
            .compose(&SE3Pose::from_axis_angle(&Vec3::x(), pitch))
            .compose(&SE3Pose::from_axis_angle(&Vec3::z(), roll));
        SE3Pose::new(*r.rotation(), Vec3::new(x, 0.0, z))
    }

    /// Axis-aligned box of the moving block at frame `k`: (min, max).
    pub fn block(&self, k: usize) -> Option<(Vec3, Vec3)> {
        if !self.params.dynamic {
            return None;
        }
        let z0 = 7.0 + 1.2 * k as f64;
        Some((Vec3::new(0.6, -0.5, z0), Vec3::new(3.4, GROUND_Y, z0 + 3.0)))
    }

    fn cast(&self, o: &Vec3, d: &Vec3, k: usize) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, class: u8, local: Vec3| {
            if t > 1e-9 && best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    point: o + d * t,
                    class,
                    local,
                });
            }
        };
        if d.x > 0.0 {
            consider((HALF_WIDTH - o.x) / d.x, WALL, Vec3::x());
        } else if d.x < 0.0 {
            consider((-HALF_WIDTH - o.x) / d.x, WALL, -Vec3::x());
        }
        if d.y > 0.0 {
            consider((GROUND_Y - o.y) / d.y, ROAD, Vec3::zeros());
        } else if d.y < 0.0 {
            consider((CEILING_Y - o.y) / d.y, CEILING, Vec3::zeros());
        }
        if self.params.pillars {
            let first = ((o.z - LIDAR_RANGE) / PILLAR_SPACING).floor() as i64;
            let last = ((o.z + MAX_DEPTH) / PILLAR_SPACING).ceil() as i64;
            for j in first..=last {
                let z0 = j as f64 * PILLAR_SPACING + 3.0;
                for side in [-1.0, 1.0] {
                    let inner = side * (HALF_WIDTH - PILLAR_DEPTH);
                    let lo = Vec3::new(inner.min(side * HALF_WIDTH), CEILING_Y, z0);
                    let hi = Vec3::new(inner.max(side * HALF_WIDTH), GROUND_Y, z0 + PILLAR_DEPTH);
                    if let Some(t) = box_entry(o, d, &lo, &hi) {
                        consider(t, WALL, Vec3::x() * side);
                    }
                }
            }
        }
        if let Some((lo, hi)) = self.block(k) {
            if let Some(t) = box_entry(o, d, &lo, &hi) {
                consider(t, VEHICLE, o + d * t - lo);
            }
        }
        best
    }

    fn color_of(hit: &Hit) -> [f64; 3] {
        let p = &hit.point;
        let tau = 2.0 * PI;
        let v = match hit.class {
            ROAD => {
                let base = 0.42
                    + 0.16 * (tau * p.z / 0.9 + 0.3 * p.x).sin()
                    + 0.08 * (tau * p.z / 2.3).sin();
                let dash = p.x.abs() < 0.12 && p.z.rem_euclid(3.0) < 1.5;
                if dash {
                    [0.95, 0.92, 0.8]
                } else {
                    [base, base * 0.95, base * 0.9]
                }
            }
            WALL => {
                let side = hit.local.x;
                let b = 0.5
                    + 0.22 * (tau * p.z / 0.8 + side).sin() * (tau * p.y / 1.1).cos()
                    + 0.1 * (tau * p.z / 3.1).sin();
                [b * 0.9 + 0.05, b * 0.7, b * 0.55]
            }
            CEILING => {
                let lamp = p.x.abs() < 0.5 && p.z.rem_euclid(6.0) < 0.6;
                if lamp {
                    [1.0, 0.97, 0.85]
                } else {
                    let b = 0.3 + 0.15 * (tau * p.z / 1.5).sin() + 0.05 * (tau * p.x / 2.0).cos();
                    [b * 0.8, b * 0.85, b]
                }
            }
            _ => {
                let l = &hit.local;
                let check =
                    ((l.x / 0.4).floor() + (l.y / 0.4).floor() + (l.z / 0.4).floor()) as i64 % 2
                        == 0;
                if check {
                    [0.85, 0.15, 0.1]
                } else {
                    [0.1, 0.1, 0.35]
                }
            }
        };
        v.map(|c| c.clamp(0.0, 1.0))
    }

    fn feature_of(&self, hit: &Hit, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[hit.class as usize] = 0.3;
        let z = if hit.class == VEHICLE {
            hit.local.z + 40.0
        } else {
            hit.point.z
        };
        let periods = [3.3, 5.1, 7.9, 12.7, 4.1, 6.3, 9.7, 15.1];
        for (j, v) in out[4..].iter_mut().enumerate() {
            let phase = j as f64 * 1.3 + hit.class as f64 * 0.7;
            *v = 0.6 * (2.0 * PI * z / periods[j % periods.len()] + phase).sin();
        }
    }

    /// Camera-frame ray direction through sub-pixel `(u, v)`.
    fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.camera;
        Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
    }

    /// Builds frame `k` in memory.
    pub fn frame(&self, k: usize) -> FrameBundle {
        let cam = &self.camera;
        let (w, h) = (cam.width, cam.height);
        let nd = self.params.feature_dim;
        let pose = self.gt_pose(k);
        let r = pose.rotation_matrix();
        let o = *pose.translation();

        let mut image = Image::zeros(w, h, 3);
        let mut depth = Image::zeros(w, h, 1);
        let mut labels = LabelMap::filled(w, h, IGNORE_LABEL);
        let mut features = Image::zeros(w, h, nd);
        let mut gt_mask = Mask::new(w, h);
        let offsets = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];
        for row in 0..h {
            for col in 0..w {
                let i = row * w + col;
                let mut rgb = [0.0; 3];
                for (du, dv) in offsets {
                    let d = r * self.pixel_ray(col as f64 + du, row as f64 + dv);
                    let c = self
                        .cast(&o, &d, k)
                        .map_or([0.05; 3], |hit| Self::color_of(&hit));
                    for ch in 0..3 {
                        rgb[ch] += 0.25 * c[ch];
                    }
                }
                image.px_mut(i).copy_from_slice(&rgb);
                let dc = self.pixel_ray(col as f64, row as f64);
                if let Some(hit) = self.cast(&o, &(r * dc), k) {
                    let z = hit.t;
                    if z <= MAX_DEPTH {
                        depth.data_mut()[i] = z;
                    }
                    labels.data_mut()[i] = hit.class;
                    self.feature_of(&hit, features.px_mut(i));
                    if hit.class == VEHICLE {
                        gt_mask.data_mut()[i] = true;
                    }
                }
            }
        }

        let explicit_mask = match self.block(k) {
            Some(b) => self.block_bbox_mask(&pose, &b, 2),
            None => Mask::new(w, h),
        };

        FrameBundle {
            index: k,
            timestamp: k as f64 * 0.1,
            image,
            scan: self.lidar_scan(k, &pose),
            dense_depth: depth,
            semantic_labels: labels,
            num_classes: CLASS_NAMES.len(),
            features,
            explicit_mask,
            gt_pose: Some(pose),
            gt_motion_mask: self.params.dynamic.then_some(gt_mask),
        }
    }

    /// Image bounding box of the block's corners, grown by `pad` pixels.
    fn block_bbox_mask(&self, pose: &SE3Pose, (lo, hi): &(Vec3, Vec3), pad: usize) -> Mask {
        let cam = &self.camera;
        let mut m = Mask::new(cam.width, cam.height);
        let (mut u0, mut u1, mut v0, mut v1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for c in 0..8 {
            let p = Vec3::new(
                if c & 1 == 0 { lo.x } else { hi.x },
                if c & 2 == 0 { lo.y } else { hi.y },
                if c & 4 == 0 { lo.z } else { hi.z },
            );
            let Ok((u, v, _)) = cam.project(&pose.apply_inverse(&p)) else {
                return m;
            };
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        let pad = pad as f64;
        let c0 = (u0.round() - pad).max(0.0) as usize;
        let c1 = (u1.round() + pad).min(cam.width as f64 - 1.0);
        let r0 = (v0.round() - pad).max(0.0) as usize;
        let r1 = (v1.round() + pad).min(cam.height as f64 - 1.0);
        if c1 < 0.0 || r1 < 0.0 {
            return m;
        }
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                m.set(col, row, true);
            }
        }
        m
    }

    fn lidar_scan(&self, k: usize, pose: &SE3Pose) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.params
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(k as u64),
        );
        let lidar_pose = pose.compose(&self.t_cam_lidar);
        let r = lidar_pose.rotation_matrix();
        let o = *lidar_pose.translation();
        let mut points = Vec::new();
        let mut intensity = Vec::new();
        let start: f64 = rng.gen_range(0.0..1.0);
        for ring in 0..LIDAR_RINGS {
            let el = (-25.0 + 50.0 * ring as f64 / (LIDAR_RINGS - 1) as f64).to_radians();
            for az in 0..360 {
                let az = (az as f64 + start).to_radians();
                let dl = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                let noise: f64 = rng.gen_range(-0.01..0.01);
                let Some(hit) = self.cast(&o, &(r * dl), k) else {
                    continue;
                };
                if hit.t > LIDAR_RANGE {
                    continue;
                }
                let c = Self::color_of(&hit);
                points.push(dl * (hit.t + noise));
                intensity.push((c[0] + c[1] + c[2]) / 3.0);
            }
        }
        PointCloud::with_intensity(points, intensity)
    }
}

/// Writes a complete fixture dataset under `dir`.
pub fn generate_fixture(dir: &Path, params: &FixtureParams) -> Result<()> {
    let scene = FixtureScene::new(*params);
    let layout = DatasetLayout::new(dir);
    for sub in [
        "image", "velodyne", "depth", "semantic", "features", "mask", "gt_mask",
    ] {
        if sub == "gt_mask" && !params.dynamic {
            continue;
        }
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let calib = layout.calibration();
    std::fs::write(&calib, scene.calibration().to_text()).map_err(|e| Error::io(&calib, e))?;
    let mut poses = Vec::with_capacity(params.frames);
    let mut stamps = Vec::with_capacity(params.frames);
    for k in 0..params.frames {
        let f = scene.frame(k);
        write_color(&layout.image(k), &f.image)?;
        write_scan(&layout.scan(k), &f.scan)?;
        write_depth(&layout.depth(k), &f.dense_depth)?;
        write_labels(&layout.semantic(k), &f.semantic_labels)?;
        write_feature_map(&layout.features(k), &f.features)?;
        write_mask(&layout.mask(k), &f.explicit_mask)?;
        if let Some(m) = &f.gt_motion_mask {
            write_mask(&layout.gt_mask(k), m)?;
        }
        poses.push(f.gt_pose.expect("fixture frames carry ground truth"));
        stamps.push(f.timestamp);
    }
    write_trajectory(&poses, &stamps, &layout.groundtruth())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_pose_is_identity() {
        let s = FixtureScene::new(FixtureParams::default());
        assert_eq!(s.gt_pose(0), SE3Pose::identity());
        assert!((s.gt_pose(1).translation().z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn depth_matches_ground_plane() {
        let s = FixtureScene::new(FixtureParams {
            frames: 1,
            ..Default::default()
        });
        let f = s.frame(0);
        let k = s.calibration().camera;
        // Bottom row centre sees the road at y = 1.5.
        let row = k.height - 1;
        let col = k.width / 2;
        let z = f.dense_depth.get(col, row, 0);
        let expected = GROUND_Y * k.fy / (row as f64 - k.cy);
        assert!((z - expected).abs() < 1e-9, "{z} vs {expected}");
        assert_eq!(f.semantic_labels.get(col, row), ROAD);
    }

    #[test]
    fn lidar_points_lie_on_surfaces() {
        let s = FixtureScene::new(FixtureParams {
            frames: 3,
            ..Default::default()
        });
        let f = s.frame(2);
        assert!(f.scan.len() > 5000);
        let world = f
            .scan
            .transformed(&f.gt_pose.unwrap().compose(&s.t_cam_lidar));
        for p in &world.points {
            let d = [
                (p.x.abs() - HALF_WIDTH).abs(),
                (p.y - GROUND_Y).abs(),
                (p.y - CEILING_Y).abs(),
            ];
            assert!(
                d.iter().cloned().fold(f64::INFINITY, f64::min) < 0.02,
                "{p:?}"
            );
        }
    }

    #[test]
    fn dynamic_block_is_masked() {
        let s = FixtureScene::new(FixtureParams {
            frames: 2,
            dynamic: true,
            ..Default::default()
        });
        let f = s.frame(1);
        let gt = f.gt_motion_mask.unwrap();
        assert!(gt.count() > 50);
        let inter = gt.zip_with(&f.explicit_mask, |a, b| a && b).unwrap();
        assert_eq!(inter.count(), gt.count());
        assert!(f.explicit_mask.count() > gt.count());
    }
}
