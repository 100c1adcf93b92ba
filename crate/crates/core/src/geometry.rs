//! Rigid-body poses, the pinhole camera and point clouds.
//!
//! Camera convention: z forward, x right, y down. Poses are stored as
//! camera-to-world transforms unless stated otherwise.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
/// se(3) tangent ordered as (translation ρ, rotation φ).
pub type Tangent = Vector6<f64>;

/// Skew-symmetric matrix with `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform with a unit quaternion rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    /// Builds a pose from a raw (w, x, y, z) quaternion, normalising it.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)),
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    pub fn from_rotation_matrix(rotation: &Mat3, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Rotation about a unit axis by `angle` radians, no translation.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self::new(UnitQuaternion::from_axis_angle(&axis, angle), Vec3::zeros())
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        let q = self.rotation.into_inner() * other.rotation.into_inner();
        SE3Pose {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let inv = self.rotation.inverse();
        SE3Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Applies the inverse transform without building it.
    pub fn apply_inverse(&self, x: &Vec3) -> Vec3 {
        self.rotation.inverse() * (x - self.translation)
    }

    /// Group exponential of a tangent vector (ρ, φ).
    pub fn exp(xi: &Tangent) -> SE3Pose {
        let rho = Vec3::new(xi[0], xi[1], xi[2]);
        let phi = Vec3::new(xi[3], xi[4], xi[5]);
        let theta = phi.norm();
        let k = hat(&phi);
        let (a, b) = if theta < 1e-6 {
            let t2 = theta * theta;
            (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
        } else {
            let t2 = theta * theta;
            (
                (1.0 - theta.cos()) / t2,
                (theta - theta.sin()) / (t2 * theta),
            )
        };
        let v = Mat3::identity() + k * a + k * k * b;
        SE3Pose::new(UnitQuaternion::from_scaled_axis(phi), v * rho)
    }

    /// Group logarithm, inverse of [`SE3Pose::exp`].
    pub fn log(&self) -> Tangent {
        let phi = self.rotation.scaled_axis();
        let theta = phi.norm();
        let k = hat(&phi);
        let v_inv = if theta < 1e-6 {
            Mat3::identity() - k * 0.5 + k * k * (1.0 / 12.0)
        } else {
            let half = 0.5 * theta;
            let c = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
            Mat3::identity() - k * 0.5 + k * k * c
        };
        let rho = v_inv * self.translation;
        Tangent::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
    }

    /// Right retraction `self ∘ exp(delta)`.
    pub fn retract(&self, delta: &Tangent) -> SE3Pose {
        self.compose(&SE3Pose::exp(delta))
    }

    /// Rotation angle of `self⁻¹ ∘ other`, radians.
    pub fn angle_to(&self, other: &SE3Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn distance_to(&self, other: &SE3Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

/// Pinhole intrinsics plus image size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidIntrinsics(format!(
                "image size must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Projects a camera-frame point to `(u, v, depth)`.
    pub fn project(&self, x_cam: &Vec3) -> Result<(f64, f64, f64)> {
        if x_cam.z <= 1e-8 {
            return Err(Error::BehindCamera { z: x_cam.z });
        }
        let u = self.fx * x_cam.x / x_cam.z + self.cx;
        let v = self.fy * x_cam.y / x_cam.z + self.cy;
        Ok((u, v, x_cam.z))
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Pixel whose centre is nearest to `(u, v)`; pixel centres sit on integer coordinates.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (col, row) = (u.round(), v.round());
        if col >= 0.0 && row >= 0.0 && (col as usize) < self.width && (row as usize) < self.height {
            Some((col as usize, row as usize))
        } else {
            None
        }
    }

    /// Pixel hit by a camera-frame point, if it is in front of the camera and inside the image.
    pub fn pixel_of_point(&self, x_cam: &Vec3) -> Option<(usize, usize)> {
        let (u, v, _) = self.project(x_cam).ok()?;
        self.pixel_of(u, v)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// LiDAR scan or map point set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Optional per-point intensity in [0, 1].
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn with_intensity(points: Vec<Vec3>, intensity: Vec<f64>) -> Self {
        debug_assert_eq!(points.len(), intensity.len());
        Self {
            points,
            intensity: Some(intensity),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn transformed(&self, pose: &SE3Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.apply(p)).collect(),
            intensity: self.intensity.clone(),
        }
    }

    /// Keeps the points whose flag is set.
    pub fn select(&self, keep: &[bool]) -> PointCloud {
        let points = self
            .points
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p)
            .collect();
        let intensity = self.intensity.as_ref().map(|i| {
            i.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .collect()
        });
        PointCloud { points, intensity }
    }

    /// Drops points whose range is outside `[min_range, max_range]`.
    pub fn clip_range(&self, min_range: f64, max_range: f64) -> PointCloud {
        let keep: Vec<bool> = self
            .points
            .iter()
            .map(|p| {
                let r = p.norm();
                r >= min_range && r <= max_range
            })
            .collect();
        self.select(&keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn rz90() -> SE3Pose {
        SE3Pose::from_axis_angle(&Vec3::z(), FRAC_PI_2)
    }

    fn pose_error(a: &SE3Pose, b: &SE3Pose) -> (f64, f64) {
        (a.angle_to(b), a.distance_to(b))
    }

    #[test]
    fn compose_identity() {
        let id = SE3Pose::identity();
        assert_eq!(id.compose(&id), id);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = SE3Pose::from_wxyz(0.3, -0.2, 0.8, 0.1, Vec3::new(1.0, -2.0, 3.5));
        let (ang, dist) = pose_error(&p.compose(&p.inverse()), &SE3Pose::identity());
        assert!(ang < 1e-9 && dist < 1e-9);
    }

    #[test]
    fn compose_matches_matrix_product() {
        let a = SE3Pose::new(*rz90().rotation(), Vec3::new(1.0, 0.0, 0.0));
        let b = SE3Pose::from_translation(Vec3::new(0.0, 1.0, 0.0));
        let c = a.compose(&b);
        // R_a t_b + t_a = (-1,0,0) + (1,0,0)
        assert_abs_diff_eq!(c.translation(), &Vec3::zeros(), epsilon = 1e-12);
        assert!(c.angle_to(&rz90()) < 1e-12);
        let m = a.to_matrix() * b.to_matrix();
        assert_abs_diff_eq!(c.to_matrix(), m, epsilon = 1e-12);
    }

    #[test]
    fn apply_examples() {
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(SE3Pose::identity().apply(&x), x);
        let t = SE3Pose::from_translation(Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(t.apply(&Vec3::zeros()), Vec3::new(0.0, 0.0, 5.0));
        let r = rz90().apply(&Vec3::x());
        assert_abs_diff_eq!(r, Vec3::y(), epsilon = 1e-12);
    }

    #[test]
    fn project_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        assert_eq!(
            k.project(&Vec3::new(0.0, 0.0, 2.0)).unwrap(),
            (50.0, 50.0, 2.0)
        );
        assert_eq!(
            k.project(&Vec3::new(1.0, 0.0, 2.0)).unwrap(),
            (100.0, 50.0, 2.0)
        );
        assert!(matches!(
            k.project(&Vec3::new(1.0, 0.0, 0.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 1).is_err());
    }

    #[test]
    fn exp_log_round_trip() {
        let xi = Tangent::new(0.3, -1.2, 0.5, 0.2, -0.4, 0.9);
        let back = SE3Pose::exp(&xi).log();
        assert_abs_diff_eq!(back, xi, epsilon = 1e-10);
    }

    fn arb_pose() -> impl Strategy<Value = SE3Pose> {
        (
            prop::array::uniform4(-1.0f64..1.0),
            prop::array::uniform3(-10.0f64..10.0),
        )
            .prop_filter("non-degenerate quaternion", |(q, _)| {
                q.iter().map(|v| v * v).sum::<f64>() > 1e-3
            })
            .prop_map(|(q, t)| SE3Pose::from_wxyz(q[0], q[1], q[2], q[3], Vec3::from(t)))
    }

    proptest! {
        #[test]
        fn double_inverse(p in arb_pose()) {
            let (ang, dist) = pose_error(&p.inverse().inverse(), &p);
            prop_assert!(ang < 1e-9 && dist < 1e-9);
        }

        #[test]
        fn compose_is_sequential_application(a in arb_pose(), b in arb_pose(), x in prop::array::uniform3(-5.0f64..5.0)) {
            let x = Vec3::from(x);
            let lhs = a.compose(&b).apply(&x);
            let rhs = a.apply(&b.apply(&x));
            prop_assert!((lhs - rhs).norm() < 1e-9);
            prop_assert!((a.compose(&b).rotation().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn unproject_inverts_project(x in -3.0f64..3.0, y in -3.0f64..3.0, z in 0.5f64..50.0) {
            let k = CameraIntrinsics::new(420.0, 410.0, 320.0, 240.0, 640, 480).unwrap();
            let p = Vec3::new(x, y, z);
            let (u, v, d) = k.project(&p).unwrap();
            prop_assert!((k.unproject(u, v, d) - p).norm() < 1e-9);
        }
    }
}
