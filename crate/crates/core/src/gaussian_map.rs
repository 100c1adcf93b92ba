//! Gaussian primitives, LiDAR-seeded initialisation and grid-snapped submaps.

use crate::geometry::{CameraIntrinsics, PointCloud, SE3Pose, Vec3};
use crate::pipeline::FrameBundle;
use crate::raster::Mask;
use crate::{Error, Result};

pub const MIN_SCALE: f64 = 1e-4;
pub const MAX_SCALE: f64 = 50.0;
/// Magnitude of the one-hot logit given to the observed class at initialisation.
pub const SEMANTIC_PRIOR_LOGIT: f64 = 10.0;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One 3D splat.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vec3,
    pub log_scale: Vec3,
    /// Quaternion (w, x, y, z); unit norm after every optimiser step.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: Vec3,
    pub semantic_logits: Vec<f64>,
    pub feature: Vec<f64>,
}

impl Gaussian {
    pub fn new(
        position: Vec3,
        scale: f64,
        color: Vec3,
        num_classes: usize,
        feature_dim: usize,
    ) -> Self {
        Self {
            position,
            log_scale: Vec3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color,
            semantic_logits: vec![0.0; num_classes],
            feature: vec![0.0; feature_dim],
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    /// Restores the storage invariants: unit quaternion, bounded scale, colour in [0, 1].
    pub fn clamp(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 && n.is_finite() {
            self.rotation.iter_mut().for_each(|v| *v /= n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
        let (lo, hi) = (MIN_SCALE.ln(), MAX_SCALE.ln());
        self.log_scale.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        self.color.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticConfig {
    pub class_names: Vec<String>,
}

impl SemanticConfig {
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Config {
                key: "classes".into(),
                msg: "at least one semantic class is required".into(),
            });
        }
        Ok(Self { class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureConfig {
    pub dim: usize,
}

impl FeatureConfig {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config {
                key: "feature_dim".into(),
                msg: "feature dimension must be at least 1".into(),
            });
        }
        Ok(Self { dim })
    }
}

/// Seeds one Gaussian per unmasked LiDAR point that lands inside the image.
///
/// `scan` is in the camera frame and `pose` is camera-to-world. The isotropic
/// scale covers roughly `scale_factor` pixels at the point's depth.
pub fn init_from_lidar(
    scan: &PointCloud,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    frame: &FrameBundle,
    refined_mask: &Mask,
    scale_factor: f64,
) -> Result<Vec<Gaussian>> {
    frame.check_dimensions(k)?;
    if !refined_mask.same_size(k.width, k.height) {
        return Err(Error::dims(
            "refined mask",
            format!("{}x{}", k.width, k.height),
            format!("{}x{}", refined_mask.width(), refined_mask.height()),
        ));
    }
    let num_classes = frame.num_classes;
    let feature_dim = frame.features.channels();
    let mut out = Vec::new();
    for p in &scan.points {
        let Some((col, row)) = k.pixel_of_point(p) else {
            continue;
        };
        if refined_mask.get(col, row) {
            continue;
        }
        let i = row * k.width + col;
        let rgb = frame.image.px(i);
        let mut g = Gaussian::new(
            pose.apply(p),
            scale_factor * p.z / k.fx,
            Vec3::new(rgb[0], rgb[1], rgb[2]),
            num_classes,
            feature_dim,
        );
        let label = frame.semantic_labels.get(col, row) as usize;
        if label < num_classes {
            g.semantic_logits[label] = SEMANTIC_PRIOR_LOGIT;
        }
        g.feature.copy_from_slice(frame.features.px(i));
        g.clamp();
        out.push(g);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubmapState {
    Active,
    Frozen,
}

/// First/second moment estimates for one Gaussian's parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u32,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }
}

/// Spatially bounded partition of the Gaussian map.
#[derive(Clone, Debug)]
pub struct Submap {
    pub origin: Vec3,
    pub extent: f64,
    grid_index: [i64; 3],
    gaussians: Vec<Gaussian>,
    state: SubmapState,
    pub(crate) moments: Vec<Moments>,
}

impl Submap {
    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn state(&self) -> SubmapState {
        self.state
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Appends Gaussians lying inside this submap's range; returns how many were kept.
    pub fn insert(&mut self, gaussians: Vec<Gaussian>) -> usize {
        let before = self.gaussians.len();
        for g in gaussians {
            if self.contains(&g.position) {
                self.moments.push(Moments::new(0));
                self.gaussians.push(g);
            }
        }
        self.gaussians.len() - before
    }

    /// Whether `p` lies in the axis-aligned range `origin ± extent`.
    pub fn contains(&self, p: &Vec3) -> bool {
        (p - self.origin).iter().all(|d| d.abs() <= self.extent)
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [Gaussian], &mut [Moments]) {
        (&mut self.gaussians, &mut self.moments)
    }

    pub(crate) fn retain(&mut self, mut keep: impl FnMut(&Gaussian) -> bool) -> usize {
        let before = self.gaussians.len();
        let flags: Vec<bool> = self.gaussians.iter().map(&mut keep).collect();
        let mut it = flags.iter();
        self.gaussians.retain(|_| *it.next().unwrap());
        let mut it = flags.iter();
        self.moments.retain(|_| *it.next().unwrap());
        before - self.gaussians.len()
    }
}

/// Removes Gaussians whose opacity is below `opacity_min`; returns the removed count.
pub fn prune(submap: &mut Submap, opacity_min: f64) -> usize {
    submap.retain(|g| g.opacity() >= opacity_min)
}

/// All submaps; at most one is active.
#[derive(Clone, Debug, Default)]
pub struct SubmapWorld {
    submaps: Vec<Submap>,
    active: Option<usize>,
}

impl SubmapWorld {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn submaps(&self) -> &[Submap] {
        &self.submaps
    }

    pub fn active(&self) -> Option<&Submap> {
        self.active.map(|i| &self.submaps[i])
    }

    pub fn active_mut(&mut self) -> Option<&mut Submap> {
        self.active.map(|i| &mut self.submaps[i])
    }

    pub fn active_index(&self) -> Option<usize> {
        self.active
    }

    pub fn gaussian_count(&self) -> usize {
        self.submaps.iter().map(Submap::len).sum()
    }

    /// Every Gaussian, active submap first, then the others in creation order.
    pub fn all_gaussians(&self) -> Vec<&Gaussian> {
        let mut out = Vec::with_capacity(self.gaussian_count());
        if let Some(a) = self.active {
            out.extend(self.submaps[a].gaussians.iter());
        }
        for (i, s) in self.submaps.iter().enumerate() {
            if Some(i) != self.active {
                out.extend(s.gaussians.iter());
            }
        }
        out
    }

    /// Active submap followed by the frozen Gaussians, as separate borrows.
    pub fn split_active(&mut self) -> Option<(&mut Submap, Vec<&Gaussian>)> {
        let a = self.active?;
        let (head, tail) = self.submaps.split_at_mut(a);
        let (active, rest) = tail.split_first_mut()?;
        let frozen = head
            .iter()
            .chain(rest.iter())
            .flat_map(|s| s.gaussians.iter())
            .collect();
        Some((active, frozen))
    }
}

/// Selects (creating if needed) the submap whose grid cell contains the pose.
///
/// The origin is the pose translation snapped to a grid of pitch `extent`. A
/// different previously active submap is frozen.
pub fn assign_submap<'a>(
    world: &'a mut SubmapWorld,
    pose: &SE3Pose,
    extent: f64,
) -> &'a mut Submap {
    assert!(extent > 0.0, "submap extent must be positive");
    let t = pose.translation();
    let grid = [
        (t.x / extent).round() as i64,
        (t.y / extent).round() as i64,
        (t.z / extent).round() as i64,
    ];
    let idx = match world
        .submaps
        .iter()
        .position(|s| s.grid_index == grid && s.extent == extent)
    {
        Some(i) => i,
        None => {
            world.submaps.push(Submap {
                origin: Vec3::new(grid[0] as f64, grid[1] as f64, grid[2] as f64) * extent,
                extent,
                grid_index: grid,
                gaussians: Vec::new(),
                state: SubmapState::Active,
                moments: Vec::new(),
            });
            world.submaps.len() - 1
        }
    };
    if let Some(prev) = world.active {
        if prev != idx {
            world.submaps[prev].state = SubmapState::Frozen;
        }
    }
    world.submaps[idx].state = SubmapState::Active;
    world.active = Some(idx);
    &mut world.submaps[idx]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::FrameBundle;
    use crate::raster::{Image, LabelMap};

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 16.0, 12.0, 32, 24).unwrap()
    }

    fn frame(k: &CameraIntrinsics) -> FrameBundle {
        let mut image = Image::zeros(k.width, k.height, 3);
        image.set(16, 12, 0, 0.25);
        let mut labels = LabelMap::filled(k.width, k.height, 0);
        labels.data_mut()[12 * k.width + 16] = 2;
        FrameBundle {
            index: 0,
            timestamp: 0.0,
            image,
            scan: PointCloud::new(vec![Vec3::new(0.0, 0.0, 10.0)]),
            dense_depth: Image::zeros(k.width, k.height, 1),
            semantic_labels: labels,
            num_classes: 3,
            features: Image::filled(k.width, k.height, 4, 0.5),
            explicit_mask: Mask::new(k.width, k.height),
            gt_pose: None,
            gt_motion_mask: None,
        }
    }

    #[test]
    fn init_on_axis_point() {
        let k = camera();
        let f = frame(&k);
        let scan = PointCloud::new(vec![Vec3::new(0.0, 0.0, 10.0)]);
        let gs =
            init_from_lidar(&scan, &SE3Pose::identity(), &k, &f, &Mask::new(32, 24), 1.0).unwrap();
        assert_eq!(gs.len(), 1);
        let g = &gs[0];
        assert!((g.scale().x - 0.02).abs() < 1e-12);
        assert_eq!(g.color, Vec3::new(0.25, 0.0, 0.0));
        assert_eq!(g.semantic_logits, vec![0.0, 0.0, 10.0]);
        assert_eq!(g.feature, vec![0.5; 4]);
        assert_eq!(g.opacity(), 0.5);
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn init_masked_and_out_of_view() {
        let k = camera();
        let f = frame(&k);
        let scan = PointCloud::new(vec![Vec3::new(0.0, 0.0, 10.0), Vec3::new(0.0, 0.0, 4.0)]);
        let all = Mask::filled(32, 24, true);
        assert!(
            init_from_lidar(&scan, &SE3Pose::identity(), &k, &f, &all, 1.0)
                .unwrap()
                .is_empty()
        );
        let outside = PointCloud::new(vec![Vec3::new(10.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -3.0)]);
        assert!(init_from_lidar(
            &outside,
            &SE3Pose::identity(),
            &k,
            &f,
            &Mask::new(32, 24),
            1.0
        )
        .unwrap()
        .is_empty());
        assert!(matches!(
            init_from_lidar(&scan, &SE3Pose::identity(), &k, &f, &Mask::new(3, 3), 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn submap_assignment() {
        let mut world = SubmapWorld::new();
        let s = assign_submap(&mut world, &SE3Pose::identity(), 50.0);
        assert_eq!(s.origin, Vec3::zeros());
        let again = assign_submap(&mut world, &SE3Pose::identity(), 50.0).origin;
        assert_eq!(again, Vec3::zeros());
        assert_eq!(world.submaps().len(), 1);
        let far = SE3Pose::from_translation(Vec3::new(60.0, 0.0, 0.0));
        assert_eq!(
            assign_submap(&mut world, &far, 50.0).origin,
            Vec3::new(50.0, 0.0, 0.0)
        );
        assert_eq!(world.submaps().len(), 2);
        assert_eq!(world.submaps()[0].state(), SubmapState::Frozen);
        assert_eq!(
            world
                .submaps()
                .iter()
                .filter(|s| s.state() == SubmapState::Active)
                .count(),
            1
        );
    }

    #[test]
    fn prune_counts() {
        let mut world = SubmapWorld::new();
        let sub = assign_submap(&mut world, &SE3Pose::identity(), 50.0);
        let mk = |p: f64| {
            let mut g = Gaussian::new(Vec3::zeros(), 0.1, Vec3::zeros(), 1, 1);
            g.opacity_logit = logit(p);
            g
        };
        sub.insert(vec![mk(0.9); 5]);
        assert_eq!(prune(sub, 0.1), 0);
        let ops = [0.01, 0.5, 0.09, 0.2, 0.01, 0.11];
        sub.insert(ops.iter().map(|&p| mk(p)).collect());
        let oracle = ops.iter().filter(|&&p| p < 0.1).count();
        assert_eq!(prune(sub, 0.1), oracle);
        assert_eq!(sub.len(), 5 + ops.len() - oracle);
        assert_eq!(sub.moments.len(), sub.len());
        let mut low = SubmapWorld::new();
        let s = assign_submap(&mut low, &SE3Pose::identity(), 10.0);
        s.insert(vec![mk(0.01); 4]);
        assert_eq!(prune(s, 0.1), 4);
    }

    #[test]
    fn clamp_restores_invariants() {
        let mut g = Gaussian::new(Vec3::zeros(), 1.0, Vec3::new(2.0, -1.0, 0.5), 1, 1);
        g.rotation = [2.0, 0.0, 0.0, 0.0];
        g.log_scale = Vec3::new(-20.0, 20.0, 0.0);
        g.clamp();
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert!((g.scale().x - MIN_SCALE).abs() < 1e-15 && (g.scale().y - MAX_SCALE).abs() < 1e-9);
        assert_eq!(g.color, Vec3::new(1.0, 0.0, 0.5));
    }
}
