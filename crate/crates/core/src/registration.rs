//! Scan-to-map registration in the style of KISS-ICP.
//!
//! A sparse voxel hash stores world-frame map points. Registration is robust
//! point-to-point ICP: nearest neighbours come from the 27 voxels around each
//! query, residuals are weighted with a Geman-McClure kernel whose scale follows
//! the adaptive threshold, and the pose is updated on the left with the SE(3)
//! exponential.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::BuildHasherDefault;

use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;

use crate::geometry::{hat, PointCloud, SE3Pose, Tangent, Vec3};
use crate::{Error, Result};

type VoxelKey = [i32; 3];
// Fixed-key hasher: iteration order is reproducible across runs.
type DetHashMap<K, V> = HashMap<K, V, BuildHasherDefault<DefaultHasher>>;

fn voxel_key(p: &Vec3, voxel_size: f64) -> VoxelKey {
    [
        (p.x / voxel_size).floor() as i32,
        (p.y / voxel_size).floor() as i32,
        (p.z / voxel_size).floor() as i32,
    ]
}

/// Keeps the first point that falls in each voxel, preserving input order.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> PointCloud {
    assert!(voxel_size > 0.0, "voxel_size must be positive");
    let mut seen: DetHashMap<VoxelKey, ()> = DetHashMap::default();
    let keep: Vec<bool> = cloud
        .points
        .iter()
        .map(|p| seen.insert(voxel_key(p, voxel_size), ()).is_none())
        .collect();
    cloud.select(&keep)
}

/// Constant-velocity prediction `prev ∘ (prev_prev⁻¹ ∘ prev)`.
pub fn predict_initial(prev: &SE3Pose, prev_prev: &SE3Pose) -> SE3Pose {
    prev.compose(&prev_prev.inverse().compose(prev))
}

/// Prediction from a trajectory tail; identity or last pose when history is short.
pub fn predict_from_history(poses: &[SE3Pose]) -> SE3Pose {
    match poses {
        [] => SE3Pose::identity(),
        [only] => *only,
        [.., prev_prev, prev] => predict_initial(prev, prev_prev),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelMapParams {
    pub voxel_size: f64,
    pub max_points_per_voxel: usize,
    pub map_range: f64,
}

impl Default for VoxelMapParams {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            max_points_per_voxel: 20,
            map_range: 100.0,
        }
    }
}

/// Sparse voxel-indexed world-frame point store.
#[derive(Clone, Debug)]
pub struct VoxelHashMap {
    params: VoxelMapParams,
    voxels: DetHashMap<VoxelKey, Vec<Vec3>>,
}

impl VoxelHashMap {
    pub fn new(params: VoxelMapParams) -> Self {
        assert!(params.voxel_size > 0.0 && params.max_points_per_voxel > 0);
        Self {
            params,
            voxels: DetHashMap::default(),
        }
    }

    pub fn params(&self) -> &VoxelMapParams {
        &self.params
    }

    pub fn voxel_size(&self) -> f64 {
        self.params.voxel_size
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn point_count(&self) -> usize {
        self.voxels.values().map(Vec::len).sum()
    }

    /// Iterates `(voxel index, points)` in unspecified but reproducible order.
    pub fn voxels(&self) -> impl Iterator<Item = (&VoxelKey, &Vec<Vec3>)> {
        self.voxels.iter()
    }

    /// All stored points, sorted by voxel key for a stable order.
    pub fn points(&self) -> Vec<Vec3> {
        let mut keys: Vec<&VoxelKey> = self.voxels.keys().collect();
        keys.sort();
        keys.into_iter()
            .flat_map(|k| self.voxels[k].iter().copied())
            .collect()
    }

    /// Inserts world-frame points, skipping full voxels.
    pub fn add_points(&mut self, points: &[Vec3]) {
        let (size, cap) = (self.params.voxel_size, self.params.max_points_per_voxel);
        for p in points {
            let bucket = self.voxels.entry(voxel_key(p, size)).or_default();
            if bucket.len() < cap {
                bucket.push(*p);
            }
        }
    }

    /// Drops voxels whose first point lies farther than `map_range` from `origin`.
    pub fn remove_far(&mut self, origin: &Vec3) {
        let range2 = self.params.map_range * self.params.map_range;
        self.voxels.retain(|_, pts| {
            pts.first()
                .is_some_and(|p| (p - origin).norm_squared() <= range2)
        });
    }

    /// Nearest stored point among the 3×3×3 voxels around `q`.
    ///
    /// Ties keep the first candidate in (voxel offset, insertion) order.
    pub fn closest_neighbor(&self, q: &Vec3) -> Option<(Vec3, f64)> {
        let [kx, ky, kz] = voxel_key(q, self.params.voxel_size);
        let mut best: Option<(Vec3, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(pts) = self.voxels.get(&[kx + dx, ky + dy, kz + dz]) else {
                        continue;
                    };
                    for p in pts {
                        let d2 = (p - q).norm_squared();
                        if best.is_none_or(|(_, b)| d2 < b) {
                            best = Some((*p, d2));
                        }
                    }
                }
            }
        }
        best
    }
}

/// Transforms the kept scan points to world frame, inserts them and evicts far voxels.
///
/// `static_mask` flags points allowed into the map (`true` = static); `None` keeps all.
pub fn update_map(
    map: &mut VoxelHashMap,
    scan: &PointCloud,
    pose: &SE3Pose,
    static_mask: Option<&[bool]>,
) {
    let world: Vec<Vec3> = match static_mask {
        Some(mask) => scan
            .points
            .iter()
            .zip(mask)
            .filter(|(_, &keep)| keep)
            .map(|(p, _)| pose.apply(p))
            .collect(),
        None => scan.points.iter().map(|p| pose.apply(p)).collect(),
    };
    map.add_points(&world);
    map.remove_far(pose.translation());
}

/// KISS-ICP adaptive correspondence threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveThreshold {
    initial_threshold: f64,
    min_motion: f64,
    max_range: f64,
    model_sse: f64,
    num_samples: usize,
}

impl AdaptiveThreshold {
    pub fn new(initial_threshold: f64, min_motion: f64, max_range: f64) -> Self {
        assert!(initial_threshold > 0.0);
        Self {
            initial_threshold,
            min_motion,
            max_range,
            model_sse: 0.0,
            num_samples: 0,
        }
    }

    /// Records the deviation between the motion-model prediction and the registered pose.
    pub fn update(&mut self, model_deviation: &SE3Pose) {
        let theta = model_deviation.rotation().angle();
        let rot_err = 2.0 * self.max_range * (theta / 2.0).sin();
        let err = model_deviation.translation().norm() + rot_err;
        if err > self.min_motion {
            self.model_sse += err * err;
            self.num_samples += 1;
        }
    }

    /// Current σ; the initial value until any motion above `min_motion` has been seen.
    pub fn threshold(&self) -> f64 {
        if self.num_samples == 0 {
            self.initial_threshold
        } else {
            (self.model_sse / self.num_samples as f64).sqrt().max(1e-6)
        }
    }

    pub fn samples(&self) -> usize {
        self.num_samples
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpSettings {
    pub max_iterations: usize,
    pub convergence: f64,
    /// Consecutive growing updates that count as divergence.
    pub divergence_window: usize,
}

impl Default for IcpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            convergence: 1e-4,
            divergence_window: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Registration {
    pub pose: SE3Pose,
    pub converged: bool,
    pub iterations: usize,
}

struct Correspondences {
    pairs: Vec<(Vec3, Vec3)>,
    cost: f64,
}

/// Geman-McClure cost of a squared residual `e`.
fn gm_cost(e: f64, kernel: f64) -> f64 {
    kernel * e / (kernel + e)
}

fn gm_weight(e: f64, kernel: f64) -> f64 {
    kernel * kernel / ((kernel + e) * (kernel + e))
}

fn associate(
    map: &VoxelHashMap,
    source: &[Vec3],
    pose: &SE3Pose,
    max_corr: f64,
    kernel: f64,
) -> Correspondences {
    let max2 = max_corr * max_corr;
    let found: Vec<(Vec3, Option<(Vec3, f64)>)> = source
        .par_iter()
        .map(|p| {
            let q = pose.apply(p);
            (q, map.closest_neighbor(&q))
        })
        .collect();
    let mut pairs = Vec::with_capacity(found.len());
    let mut cost = 0.0;
    for (q, nn) in found {
        match nn {
            Some((target, d2)) if d2 < max2 => {
                cost += gm_cost(d2, kernel);
                pairs.push((q, target));
            }
            _ => cost += gm_cost(max2, kernel),
        }
    }
    Correspondences { pairs, cost }
}

fn gauss_newton_step(pairs: &[(Vec3, Vec3)], kernel: f64) -> Tangent {
    let mut h = Matrix6::<f64>::zeros();
    let mut b = Vector6::<f64>::zeros();
    for (q, target) in pairs {
        let r = q - target;
        let w = gm_weight(r.norm_squared(), kernel);
        // d(exp(δ)·q)/dδ = [I, -[q]×]
        let mut j = nalgebra::Matrix3x6::<f64>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(q)));
        h += j.transpose() * j * w;
        b += j.transpose() * r * w;
    }
    if let Some(chol) = h.cholesky() {
        return -chol.solve(&b);
    }
    let damping = 1e-9 * h.trace().max(1e-12);
    let damped = h + Matrix6::identity() * damping;
    damped
        .cholesky()
        .map(|c| -c.solve(&b))
        .unwrap_or_else(Tangent::zeros)
}

/// Robust point-to-point ICP of a sensor-frame scan against the map.
pub fn register_scan(
    map: &VoxelHashMap,
    scan: &PointCloud,
    init: &SE3Pose,
    thr: &AdaptiveThreshold,
) -> Result<Registration> {
    register_scan_with(map, scan, init, thr.threshold(), &IcpSettings::default())
}

/// [`register_scan`] with an explicit σ and iteration settings.
///
/// Correspondences are gated at 3σ and weighted with kernel scale σ/3. A step is
/// accepted only if it does not raise the robust objective; rejected steps are
/// halved up to four times before the solver declares convergence. The update
/// norm growing for `divergence_window` consecutive iterations while the
/// objective stalls (under 0.1% drop per step) returns `Diverged`.
pub fn register_scan_with(
    map: &VoxelHashMap,
    scan: &PointCloud,
    init: &SE3Pose,
    sigma: f64,
    settings: &IcpSettings,
) -> Result<Registration> {
    if map.is_empty() {
        return Err(Error::EmptyInput("voxel map"));
    }
    if scan.is_empty() {
        return Err(Error::EmptyInput("scan"));
    }
    let max_corr = 3.0 * sigma;
    let kernel = sigma / 3.0;
    let source = &scan.points;

    let mut pose = *init;
    let mut current = associate(map, source, &pose, max_corr, kernel);
    let mut prev_norm = f64::INFINITY;
    let mut growing = 0usize;
    // Relative objective drop of the last accepted step.
    let mut last_gain = 0.0;

    for iteration in 1..=settings.max_iterations {
        if current.pairs.is_empty() {
            return Ok(Registration {
                pose,
                converged: false,
                iterations: iteration - 1,
            });
        }
        let mut dx = gauss_newton_step(&current.pairs, kernel);
        let step_norm = dx.norm();

        if step_norm > prev_norm && last_gain < 1e-3 {
            growing += 1;
            if growing >= settings.divergence_window {
                return Err(Error::Diverged {
                    iterations: iteration,
                });
            }
        } else {
            growing = 0;
        }
        prev_norm = step_norm;

        if step_norm < settings.convergence {
            pose = SE3Pose::exp(&dx).compose(&pose);
            return Ok(Registration {
                pose,
                converged: true,
                iterations: iteration,
            });
        }

        let mut accepted = None;
        for _ in 0..5 {
            let candidate = SE3Pose::exp(&dx).compose(&pose);
            let next = associate(map, source, &candidate, max_corr, kernel);
            if next.cost <= current.cost {
                accepted = Some((candidate, next));
                break;
            }
            dx *= 0.5;
        }
        match accepted {
            Some((candidate, next)) => {
                last_gain = (current.cost - next.cost) / current.cost.max(f64::MIN_POSITIVE);
                pose = candidate;
                current = next;
            }
            None => {
                // No descent direction left: we are at a local minimum of the objective.
                return Ok(Registration {
                    pose,
                    converged: true,
                    iterations: iteration,
                });
            }
        }
    }
    Ok(Registration {
        pose,
        converged: false,
        iterations: settings.max_iterations,
    })
}

/// Robust objective at `pose`, as minimised by [`register_scan_with`].
pub fn icp_objective(map: &VoxelHashMap, scan: &PointCloud, pose: &SE3Pose, sigma: f64) -> f64 {
    associate(map, &scan.points, pose, 3.0 * sigma, sigma / 3.0).cost
}
