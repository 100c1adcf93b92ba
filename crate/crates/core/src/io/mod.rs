//! Dataset ingestion, exporters and the synthetic fixture generator.
//!
//! A dataset directory holds:
//!
//! ```text
//! calib.txt              K, image_size, T_cam_lidar, classes, feature_dim
//! groundtruth.txt        optional TUM trajectory of camera-to-world poses
//! image/000000.png       RGB
//! velodyne/000000.bin    LiDAR scan (LiDAR frame)
//! depth/000000.depth     dense depth
//! semantic/000000.png    class labels
//! features/000000.lvdf   per-pixel descriptors
//! mask/000000.png        explicit dynamic mask
//! gt_mask/000000.png     optional ground-truth motion mask
//! ```
//!
//! Frame indices run contiguously from 0. Timestamps come from the
//! ground-truth file when present, otherwise they are `0.1 · index`.

mod fixture;
mod formats;
mod ply;
mod trajectory;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use fixture::{generate_fixture, FixtureParams, FixtureScene};
pub use formats::*;
pub use ply::{
    encode_ply, encode_sidecar, parse_ply, parse_sidecar, read_map, sidecar_path, write_map,
};
pub use trajectory::{
    encode_trajectory, format_pose_line, parse_pose_line, parse_trajectory, read_trajectory,
    write_trajectory,
};

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, SE3Pose, Vec3};
use crate::pipeline::{FrameBundle, LossLogEntry};

/// Camera model, LiDAR extrinsic and asset dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub camera: CameraIntrinsics,
    /// Maps LiDAR-frame points into the camera frame.
    pub t_cam_lidar: SE3Pose,
    pub class_names: Vec<String>,
    pub feature_dim: usize,
}

impl Calibration {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn to_text(&self) -> String {
        let k = &self.camera;
        let r = self.t_cam_lidar.rotation_matrix();
        let t = self.t_cam_lidar.translation();
        let mut s = String::new();
        writeln!(s, "K: {} 0 {} 0 {} {} 0 0 1", k.fx, k.cx, k.fy, k.cy).unwrap();
        writeln!(s, "image_size: {} {}", k.width, k.height).unwrap();
        write!(s, "T_cam_lidar:").unwrap();
        for row in 0..3 {
            write!(
                s,
                " {} {} {} {}",
                r[(row, 0)],
                r[(row, 1)],
                r[(row, 2)],
                t[row]
            )
            .unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "classes: {}", self.class_names.join(" ")).unwrap();
        writeln!(s, "feature_dim: {}", self.feature_dim).unwrap();
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |msg: String| Error::CalibrationParse {
            path: path.to_path_buf(),
            msg,
        };
        let nums = |key: &str, v: &str, n: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = v
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(format!("{key}: non-numeric value")))?;
            if vals.len() != n {
                return Err(err(format!(
                    "{key}: expected {n} values, found {}",
                    vals.len()
                )));
            }
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(err(format!("{key}: non-finite value")));
            }
            Ok(vals)
        };
        let (mut kmat, mut size, mut ext, mut classes, mut fdim) = (None, None, None, None, None);
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, v) = line
                .split_once(':')
                .ok_or_else(|| err(format!("line {line:?} is not `key: values`")))?;
            match key.trim() {
                "K" => kmat = Some(nums("K", v, 9)?),
                "image_size" => size = Some(nums("image_size", v, 2)?),
                "T_cam_lidar" => ext = Some(nums("T_cam_lidar", v, 12)?),
                "classes" => {
                    classes = Some(v.split_whitespace().map(String::from).collect::<Vec<_>>())
                }
                "feature_dim" => {
                    fdim = Some(
                        v.trim()
                            .parse::<usize>()
                            .map_err(|_| err("feature_dim: not an integer".into()))?,
                    )
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let kmat = kmat.ok_or_else(|| err("missing K".into()))?;
        let size = size.ok_or_else(|| err("missing image_size".into()))?;
        let ext = ext.ok_or_else(|| err("missing T_cam_lidar".into()))?;
        let class_names = classes.ok_or_else(|| err("missing classes".into()))?;
        let feature_dim = fdim.ok_or_else(|| err("missing feature_dim".into()))?;
        if class_names.is_empty() || class_names.len() > 255 {
            return Err(err(format!(
                "need 1..=255 classes, found {}",
                class_names.len()
            )));
        }
        if feature_dim == 0 {
            return Err(err("feature_dim must be at least 1".into()));
        }
        if size.iter().any(|v| *v < 1.0 || v.fract() != 0.0) {
            return Err(err("image_size must be positive integers".into()));
        }
        let camera = CameraIntrinsics::new(
            kmat[0],
            kmat[4],
            kmat[2],
            kmat[5],
            size[0] as usize,
            size[1] as usize,
        )
        .map_err(|e| err(e.to_string()))?;
        let r = Matrix3::new(
            ext[0], ext[1], ext[2], ext[4], ext[5], ext[6], ext[8], ext[9], ext[10],
        );
        let svd_ok =
            (r * r.transpose() - Matrix3::identity()).abs().max() < 1e-4 && r.determinant() > 0.0;
        if !svd_ok {
            return Err(err("T_cam_lidar rotation is not orthonormal".into()));
        }
        let t_cam_lidar = SE3Pose::from_rotation_matrix(&r, Vec3::new(ext[3], ext[7], ext[11]));
        Ok(Self {
            camera,
            t_cam_lidar,
            class_names,
            feature_dim,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// File locations of a dataset.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn calibration(&self) -> PathBuf {
        self.root.join("calib.txt")
    }

    pub fn groundtruth(&self) -> PathBuf {
        self.root.join("groundtruth.txt")
    }

    fn frame_file(&self, dir: &str, index: usize, ext: &str) -> PathBuf {
        self.root.join(dir).join(format!("{index:06}.{ext}"))
    }

    pub fn image(&self, i: usize) -> PathBuf {
        self.frame_file("image", i, "png")
    }

    pub fn scan(&self, i: usize) -> PathBuf {
        self.frame_file("velodyne", i, "bin")
    }

    pub fn depth(&self, i: usize) -> PathBuf {
        self.frame_file("depth", i, "depth")
    }

    pub fn semantic(&self, i: usize) -> PathBuf {
        self.frame_file("semantic", i, "png")
    }

    pub fn features(&self, i: usize) -> PathBuf {
        self.frame_file("features", i, "lvdf")
    }

    pub fn mask(&self, i: usize) -> PathBuf {
        self.frame_file("mask", i, "png")
    }

    pub fn gt_mask(&self, i: usize) -> PathBuf {
        self.frame_file("gt_mask", i, "png")
    }

    /// Every file frame `i` requires.
    pub fn required(&self, i: usize) -> [PathBuf; 6] {
        [
            self.image(i),
            self.scan(i),
            self.depth(i),
            self.semantic(i),
            self.features(i),
            self.mask(i),
        ]
    }
}

/// An opened dataset; frames load lazily.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub layout: DatasetLayout,
    pub calibration: Calibration,
    frame_count: usize,
    gt: Option<(Vec<SE3Pose>, Vec<f64>)>,
}

/// Opens a dataset directory and checks that every frame's files exist.
pub fn open_dataset(root: &Path) -> Result<Dataset> {
    let layout = DatasetLayout::new(root);
    let calibration = Calibration::load(&layout.calibration())?;
    let mut frame_count = 0;
    while layout.image(frame_count).is_file() {
        frame_count += 1;
    }
    for i in 0..frame_count {
        for p in layout.required(i) {
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
        }
    }
    let gt_path = layout.groundtruth();
    let gt = if gt_path.is_file() {
        let (poses, stamps) = read_trajectory(&gt_path)?;
        if poses.len() != frame_count {
            return Err(Error::dims(
                gt_path.display().to_string(),
                format!("{frame_count} poses"),
                format!("{} poses", poses.len()),
            ));
        }
        Some((poses, stamps))
    } else {
        None
    };
    Ok(Dataset {
        layout,
        calibration,
        frame_count,
        gt,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frame_count
    }

    pub fn is_empty(&self) -> bool {
        self.frame_count == 0
    }

    pub fn ground_truth(&self) -> Option<&[SE3Pose]> {
        self.gt.as_ref().map(|(p, _)| p.as_slice())
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        self.gt.as_ref().map_or(i as f64 * 0.1, |(_, t)| t[i])
    }

    /// Loads and validates frame `i`.
    pub fn load_frame(&self, i: usize) -> Result<FrameBundle> {
        let l = &self.layout;
        let k = &self.calibration.camera;
        let check = |path: &Path, w: usize, h: usize| -> Result<()> {
            if w != k.width || h != k.height {
                return Err(Error::dims(
                    path.display().to_string(),
                    format!("{}x{}", k.width, k.height),
                    format!("{w}x{h}"),
                ));
            }
            Ok(())
        };
        let image = load_color(&l.image(i))?;
        check(&l.image(i), image.width(), image.height())?;
        let scan = load_scan(&l.scan(i))?;
        let dense_depth = load_depth(&l.depth(i))?;
        check(&l.depth(i), dense_depth.width(), dense_depth.height())?;
        let semantic_labels = load_labels(&l.semantic(i))?;
        check(
            &l.semantic(i),
            semantic_labels.width(),
            semantic_labels.height(),
        )?;
        let features = load_feature_map(&l.features(i))?;
        check(&l.features(i), features.width(), features.height())?;
        if features.channels() != self.calibration.feature_dim {
            return Err(Error::dims(
                l.features(i).display().to_string(),
                format!("{} feature channels", self.calibration.feature_dim),
                format!("{} feature channels", features.channels()),
            ));
        }
        let explicit_mask = load_mask(&l.mask(i))?;
        check(&l.mask(i), explicit_mask.width(), explicit_mask.height())?;
        let gt_motion_mask = if l.gt_mask(i).is_file() {
            let m = load_mask(&l.gt_mask(i))?;
            check(&l.gt_mask(i), m.width(), m.height())?;
            Some(m)
        } else {
            None
        };
        Ok(FrameBundle {
            index: i,
            timestamp: self.timestamp(i),
            image,
            scan,
            dense_depth,
            semantic_labels,
            num_classes: self.calibration.num_classes(),
            features,
            explicit_mask,
            gt_pose: self.gt.as_ref().map(|(p, _)| p[i]),
            gt_motion_mask,
        })
    }

    /// Frames in index order.
    pub fn frames(&self) -> impl Iterator<Item = Result<FrameBundle>> + '_ {
        (0..self.frame_count).map(|i| self.load_frame(i))
    }
}

/// One line per entry: `frame iteration l_c l_depth l_s l_dino total`.
pub fn encode_loss_log(entries: &[LossLogEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let r = &e.report;
        writeln!(
            s,
            "{} {} {} {} {} {} {}",
            e.frame, e.iteration, r.l_c, r.l_depth, r.l_s, r.l_dino, r.total
        )
        .unwrap();
    }
    s
}

pub fn write_loss_log(path: &Path, entries: &[LossLogEntry]) -> Result<()> {
    std::fs::write(path, encode_loss_log(entries)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib() -> Calibration {
        Calibration {
            camera: CameraIntrinsics::new(80.0, 80.0, 64.0, 40.0, 128, 80).unwrap(),
            t_cam_lidar: SE3Pose::from_rotation_matrix(
                &Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
                Vec3::new(0.0, -0.08, -0.27),
            ),
            class_names: vec!["road".into(), "car".into()],
            feature_dim: 4,
        }
    }

    #[test]
    fn calibration_round_trip() {
        let c = calib();
        let back = Calibration::parse(&c.to_text(), Path::new("calib.txt")).unwrap();
        assert_eq!(back.camera, c.camera);
        assert_eq!(back.class_names, c.class_names);
        assert!(back.t_cam_lidar.distance_to(&c.t_cam_lidar) < 1e-12);
        assert!(back.t_cam_lidar.angle_to(&c.t_cam_lidar) < 1e-9);
    }

    #[test]
    fn calibration_errors_name_the_file() {
        let p = Path::new("/data/calib.txt");
        let e = Calibration::parse("K: 1 2 3", p).unwrap_err();
        assert!(e.to_string().contains("/data/calib.txt"), "{e}");
        assert!(Calibration::parse("", p).is_err());
        let bad = calib()
            .to_text()
            .replace("feature_dim: 4", "feature_dim: x");
        assert!(matches!(
            Calibration::parse(&bad, p),
            Err(Error::CalibrationParse { .. })
        ));
    }

    #[test]
    fn empty_directory_is_missing_calibration() {
        let dir = tempfile::tempdir().unwrap();
        match open_dataset(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("calib.txt")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
