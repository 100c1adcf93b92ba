//! EWA projection of a 3D Gaussian to an image-plane splat, and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Vector2};

use crate::gaussian_map::{sigmoid, Gaussian};
use crate::geometry::{hat, CameraIntrinsics, Mat3, SE3Pose, Vec3};

use super::RenderSettings;

/// Squared Mahalanobis radius holding 99% of a 2D Gaussian's mass.
pub const CHI2_99: f64 = 9.210340371976184;

/// A projected Gaussian, with the intermediates the backward pass needs.
#[derive(Clone, Debug)]
pub struct Splat {
    /// Index into the render input.
    pub index: usize,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    /// sigmoid(opacity_logit)
    pub opacity: f64,
    /// Pixels farther than this from `mean` receive alpha below the skip threshold.
    pub radius: f64,
    pub(crate) cam: Vec3,
    pub(crate) jac: Matrix2x3<f64>,
    pub(crate) cov_cam: Mat3,
    pub(crate) rot: Mat3,
    pub(crate) scale: Vec3,
    pub(crate) quat: [f64; 4],
    pub(crate) quat_norm: f64,
}

pub(crate) fn quat_to_matrix(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Camera point at which the projection Jacobian is evaluated: lateral
/// offsets are clamped to 1.3× the half field of view, as in reference 3DGS, so
/// off-screen Gaussians close to the near plane keep a bounded footprint.
/// Also reports which of x and y were clamped.
fn jacobian_point(cam: &Vec3, k: &CameraIntrinsics) -> ((f64, f64, f64), (bool, bool)) {
    let lim_x = 1.3 * (k.width as f64 * 0.5) / k.fx;
    let lim_y = 1.3 * (k.height as f64 * 0.5) / k.fy;
    let z = cam.z;
    let (tx, ty) = (cam.x / z, cam.y / z);
    let (cx, cy) = (tx.abs() > lim_x, ty.abs() > lim_y);
    let x = if cx {
        tx.clamp(-lim_x, lim_x) * z
    } else {
        cam.x
    };
    let y = if cy {
        ty.clamp(-lim_y, lim_y) * z
    } else {
        cam.y
    };
    ((x, y, z), (cx, cy))
}

/// Projects `g` through the camera at `pose` (camera-to-world).
///
/// Returns `None` when the Gaussian is nearer than the near plane, its 99%
/// ellipse misses the image, or it can never reach the alpha threshold.
pub fn project_gaussian(
    g: &Gaussian,
    index: usize,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
) -> Option<Splat> {
    let w_rot = pose.rotation_matrix().transpose();
    let cam = w_rot * (g.position - pose.translation());
    if !(cam.z >= settings.near) {
        return None;
    }
    let qn = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let quat = g.rotation.map(|v| v / qn);
    let rot = quat_to_matrix(&quat);
    let scale = g.log_scale.map(f64::exp);
    let m = rot * Mat3::from_diagonal(&scale);
    let cov_world = m * m.transpose();
    let cov_cam = w_rot * cov_world * w_rot.transpose();

    let ((x, y, z), _) = jacobian_point(&cam, k);
    let jac = Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * y / (z * z),
    );
    let cov = jac * cov_cam * jac.transpose() + Matrix2::identity() * settings.low_pass;
    let det = cov.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let mean = Vector2::new(k.fx * cam.x / z + k.cx, k.fy * cam.y / z + k.cy);

    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let r99 = (CHI2_99 * lambda_max).sqrt();
    if mean.x + r99 < -0.5
        || mean.x - r99 > k.width as f64 - 0.5
        || mean.y + r99 < -0.5
        || mean.y - r99 > k.height as f64 - 0.5
    {
        return None;
    }

    let opacity = sigmoid(g.opacity_logit);
    let peak = opacity.min(settings.max_alpha);
    let radius = if settings.min_alpha <= 0.0 {
        f64::INFINITY
    } else if peak < settings.min_alpha {
        return None;
    } else {
        // dᵀ Σ⁻¹ d ≥ |d|² / λmax, so alpha < min_alpha beyond this radius.
        (2.0 * lambda_max * (peak / settings.min_alpha).ln()).sqrt() * (1.0 + 1e-9) + 1e-9
    };

    Some(Splat {
        index,
        mean,
        cov,
        conic,
        depth: z,
        opacity,
        radius,
        cam,
        jac,
        cov_cam,
        rot,
        scale,
        quat,
        quat_norm: qn,
    })
}

/// Upstream gradient on one splat's image-plane quantities.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct SplatGrad {
    pub mean: Vector2<f64>,
    /// Full-matrix gradient w.r.t. the conic entries.
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub depth: f64,
}

/// Geometry gradients of one Gaussian plus its contribution to the pose gradient.
pub(crate) struct GeometryGrad {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// (ρ, φ) for a right perturbation of the camera-to-world pose.
    pub pose: [f64; 6],
}

/// Chains image-plane gradients back to the Gaussian parameters and the pose.
pub(crate) fn project_backward(
    s: &Splat,
    up: &SplatGrad,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
) -> GeometryGrad {
    let w_rot = pose.rotation_matrix().transpose();
    let ((x, y, z), (clamped_x, clamped_y)) = jacobian_point(&s.cam, k);

    // conic = cov⁻¹  ⇒  dL/dcov = -conic · G · conic
    let g_cov = -(s.conic * up.conic * s.conic);
    let g_cov = (g_cov + g_cov.transpose()) * 0.5;
    // cov = J Σc Jᵀ + λI
    let g_cov_cam = s.jac.transpose() * g_cov * s.jac;
    let g_jac = g_cov * s.jac * s.cov_cam * 2.0;

    let (fx, fy) = (k.fx, k.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    // The mean always uses the unclamped point.
    let (cx, cy) = (s.cam.x, s.cam.y);
    let mut g_cam = Vec3::new(
        up.mean.x * fx / z,
        up.mean.y * fy / z,
        -up.mean.x * fx * cx / z2 - up.mean.y * fy * cy / z2 + up.depth,
    );
    // J02 = -fx·x/z², with x = tx·z frozen at the clamp (so J02 = -fx·tx/z).
    if clamped_x {
        g_cam.z += g_jac[(0, 2)] * (fx * x / z3);
    } else {
        g_cam.x += g_jac[(0, 2)] * (-fx / z2);
        g_cam.z += g_jac[(0, 2)] * (2.0 * fx * x / z3);
    }
    if clamped_y {
        g_cam.z += g_jac[(1, 2)] * (fy * y / z3);
    } else {
        g_cam.y += g_jac[(1, 2)] * (-fy / z2);
        g_cam.z += g_jac[(1, 2)] * (2.0 * fy * y / z3);
    }
    g_cam.z += g_jac[(0, 0)] * (-fx / z2) + g_jac[(1, 1)] * (-fy / z2);

    // Σc = W Σ Wᵀ, Σ = M Mᵀ, M = R S
    let g_cov_world = w_rot.transpose() * g_cov_cam * w_rot;
    let m = s.rot * Mat3::from_diagonal(&s.scale);
    let g_m = g_cov_world * m * 2.0;
    let rt_gm = s.rot.transpose() * g_m;
    let log_scale = Vec3::new(
        rt_gm[(0, 0)] * s.scale.x,
        rt_gm[(1, 1)] * s.scale.y,
        rt_gm[(2, 2)] * s.scale.z,
    );
    let g_rot = g_m * Mat3::from_diagonal(&s.scale);
    let rotation = quat_backward(&s.quat, s.quat_norm, &g_rot);

    let position = w_rot.transpose() * g_cam;

    // x_c(δ) = exp(δ)⁻¹ x_c ≈ x_c - ρ + [x_c]× φ
    let g_rho = -g_cam;
    let mut g_phi = -(hat(&s.cam) * g_cam);
    for axis in 0..3 {
        let e = hat(&Vec3::ith(axis, 1.0));
        let d_cov = -(e * s.cov_cam) + s.cov_cam * e;
        g_phi[axis] += g_cov_cam.component_mul(&d_cov).sum();
    }

    GeometryGrad {
        position,
        log_scale,
        rotation,
        opacity_logit: up.opacity * s.opacity * (1.0 - s.opacity),
        pose: [g_rho.x, g_rho.y, g_rho.z, g_phi.x, g_phi.y, g_phi.z],
    }
}

/// Gradient of a rotation-matrix loss w.r.t. the raw (unnormalised) quaternion.
fn quat_backward(q: &[f64; 4], norm: f64, g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let d_w = Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let d_x = Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let d_y = Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let d_z = Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    let gn = [
        2.0 * g.component_mul(&d_w).sum(),
        2.0 * g.component_mul(&d_x).sum(),
        2.0 * g.component_mul(&d_y).sum(),
        2.0 * g.component_mul(&d_z).sum(),
    ];
    let dot: f64 = gn.iter().zip(q).map(|(a, b)| a * b).sum();
    [
        (gn[0] - dot * w) / norm,
        (gn[1] - dot * x) / norm,
        (gn[2] - dot * y) / norm,
        (gn[3] - dot * z) / norm,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> RenderSettings {
        RenderSettings::default()
    }

    #[test]
    fn isotropic_on_axis_cov() {
        let k = CameraIntrinsics::new(200.0, 200.0, 32.0, 32.0, 64, 64).unwrap();
        let (s, z) = (0.05, 4.0);
        let g = Gaussian::new(Vec3::new(0.0, 0.0, z), s, Vec3::zeros(), 1, 1);
        let sp = project_gaussian(&g, 0, &SE3Pose::identity(), &k, &settings()).unwrap();
        let expected = (200.0 * s / z).powi(2) + 0.3;
        assert!((sp.cov[(0, 0)] - expected).abs() < 1e-12);
        assert!((sp.cov[(1, 1)] - expected).abs() < 1e-12);
        assert!(sp.cov[(0, 1)].abs() < 1e-12);
        assert_eq!(sp.mean, Vector2::new(32.0, 32.0));
        assert_eq!(sp.depth, z);
    }

    #[test]
    fn behind_camera_is_culled() {
        let k = CameraIntrinsics::new(200.0, 200.0, 32.0, 32.0, 64, 64).unwrap();
        let g = Gaussian::new(Vec3::new(0.0, 0.0, -2.0), 0.1, Vec3::zeros(), 1, 1);
        assert!(project_gaussian(&g, 0, &SE3Pose::identity(), &k, &settings()).is_none());
        let near = Gaussian::new(Vec3::new(0.0, 0.0, 0.1), 0.1, Vec3::zeros(), 1, 1);
        assert!(project_gaussian(&near, 0, &SE3Pose::identity(), &k, &settings()).is_none());
        let off = Gaussian::new(Vec3::new(50.0, 0.0, 2.0), 0.01, Vec3::zeros(), 1, 1);
        assert!(project_gaussian(&off, 0, &SE3Pose::identity(), &k, &settings()).is_none());
    }

    #[test]
    fn rotation_leaves_isotropic_cov_unchanged() {
        let k = CameraIntrinsics::new(150.0, 140.0, 30.0, 20.0, 64, 48).unwrap();
        let mut g = Gaussian::new(Vec3::new(0.3, -0.2, 3.0), 0.07, Vec3::zeros(), 1, 1);
        let a = project_gaussian(&g, 0, &SE3Pose::identity(), &k, &settings()).unwrap();
        g.rotation = [0.3, -0.5, 0.7, 0.1];
        let b = project_gaussian(&g, 0, &SE3Pose::identity(), &k, &settings()).unwrap();
        assert!((a.cov - b.cov).abs().max() < 1e-12);
    }
}
