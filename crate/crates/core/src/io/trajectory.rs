//! TUM trajectory text format: `timestamp tx ty tz qx qy qz qw` per line.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{SE3Pose, Vec3};

use super::formats::{read_bytes, write_bytes};

/// Six decimals when that is exact, otherwise the shortest exact form.
fn format_timestamp(t: f64) -> String {
    let fixed = format!("{t:.6}");
    if fixed.parse::<f64>().ok() == Some(t) {
        fixed
    } else {
        format!("{t}")
    }
}

pub fn format_pose_line(timestamp: f64, pose: &SE3Pose) -> String {
    let t = pose.translation();
    let q = pose.rotation().quaternion();
    format!(
        "{} {} {} {} {} {} {} {}",
        format_timestamp(timestamp),
        t.x,
        t.y,
        t.z,
        q.i,
        q.j,
        q.k,
        q.w
    )
}

pub fn encode_trajectory(poses: &[SE3Pose], timestamps: &[f64]) -> Result<String> {
    if poses.len() != timestamps.len() {
        return Err(Error::LengthMismatch {
            estimated: poses.len(),
            reference: timestamps.len(),
        });
    }
    let mut out = String::new();
    for (p, t) in poses.iter().zip(timestamps) {
        writeln!(out, "{}", format_pose_line(*t, p)).expect("writing to a String");
    }
    Ok(out)
}

pub fn write_trajectory(poses: &[SE3Pose], timestamps: &[f64], path: &Path) -> Result<()> {
    write_bytes(path, encode_trajectory(poses, timestamps)?.as_bytes())
}

/// Parses one pose line; `None` for blank and `#` lines.
pub fn parse_pose_line(line: &str) -> std::result::Result<Option<(f64, SE3Pose)>, String> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != 8 {
        return Err(format!("expected 8 fields, found {}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err("non-finite value".into());
    }
    let qn = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
    if qn < 1e-9 {
        return Err("zero quaternion".into());
    }
    Ok(Some((
        v[0],
        SE3Pose::from_wxyz(v[7], v[4], v[5], v[6], Vec3::new(v[1], v[2], v[3])),
    )))
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<(Vec<SE3Pose>, Vec<f64>)> {
    let mut poses = Vec::new();
    let mut stamps = Vec::new();
    for (n, line) in text.lines().enumerate() {
        match parse_pose_line(line) {
            Ok(Some((t, p))) => {
                stamps.push(t);
                poses.push(p);
            }
            Ok(None) => {}
            Err(msg) => {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    msg: format!("line {}: {msg}", n + 1),
                })
            }
        }
    }
    Ok((poses, stamps))
}

/// Returns poses and timestamps.
pub fn read_trajectory(path: &Path) -> Result<(Vec<SE3Pose>, Vec<f64>)> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Malformed {
        path: path.to_path_buf(),
        msg: "not UTF-8 text".into(),
    })?;
    parse_trajectory(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_line() {
        assert_eq!(
            format_pose_line(0.0, &SE3Pose::identity()),
            "0.000000 0 0 0 0 0 0 1"
        );
    }

    #[test]
    fn empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        write_trajectory(&[], &[], &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        let (poses, stamps) = read_trajectory(&p).unwrap();
        assert!(poses.is_empty() && stamps.is_empty());
        assert!(write_trajectory(&[SE3Pose::identity()], &[], &p).is_err());
    }

    #[test]
    fn malformed_lines() {
        let p = Path::new("t.txt");
        assert!(parse_trajectory("0 1 2 3", p).is_err());
        assert!(parse_trajectory("0 0 0 0 0 0 0 x", p).is_err());
        assert!(parse_trajectory("0 0 0 0 0 0 0 0", p).is_err());
        assert_eq!(parse_trajectory("# header\n\n", p).unwrap().0.len(), 0);
    }

    proptest! {
        #[test]
        fn round_trip(
            raw in prop::collection::vec(
                (-1e3f64..1e3, -50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0,
                 -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.05f64..1.0),
                0..20)
        ) {
            let poses: Vec<SE3Pose> = raw
                .iter()
                .map(|r| SE3Pose::from_wxyz(r.7, r.4, r.5, r.6, Vec3::new(r.1, r.2, r.3)))
                .collect();
            let stamps: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let text = encode_trajectory(&poses, &stamps).unwrap();
            let (p2, s2) = parse_trajectory(&text, Path::new("mem")).unwrap();
            prop_assert_eq!(p2.len(), poses.len());
            for ((a, b), (sa, sb)) in poses.iter().zip(&p2).zip(stamps.iter().zip(&s2)) {
                prop_assert!((sa - sb).abs() <= 1e-9);
                prop_assert!((a.translation() - b.translation()).abs().max() <= 1e-9);
                let (qa, qb) = (a.rotation().coords, b.rotation().coords);
                prop_assert!((qa - qb).abs().max() <= 1e-9);
            }
        }
    }
}
