//! Gaussian map export: binary PLY for geometry and appearance plus an `LVDG`
//! sidecar for semantic logits and features.
//!
//! PLY vertex properties are little-endian floats `x y z scale_0..2 rot_0..3
//! opacity red green blue`, with log scales, (w, x, y, z) rotation and logit
//! opacity. The sidecar is `"LVDG"`, u32 count, u32 L, u32 N_d, then per
//! Gaussian L logits and N_d feature values as f32.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gaussian_map::Gaussian;
use crate::geometry::Vec3;

use super::formats::{read_bytes, write_bytes};

pub const SIDECAR_MAGIC: &[u8; 4] = b"LVDG";

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
    "red", "green", "blue",
];

/// Sidecar path next to a PLY file.
pub fn sidecar_path(ply: &Path) -> PathBuf {
    ply.with_extension("lvdg")
}

pub fn encode_ply<'a>(gaussians: impl ExactSizeIterator<Item = &'a Gaussian>) -> Vec<u8> {
    let mut out = Vec::new();
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        gaussians.len()
    );
    for p in PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());
    for g in gaussians {
        let vals = [
            g.position.x,
            g.position.y,
            g.position.z,
            g.log_scale.x,
            g.log_scale.y,
            g.log_scale.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
            g.opacity_logit,
            g.color.x,
            g.color.y,
            g.color.z,
        ];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode_sidecar<'a>(
    gaussians: impl ExactSizeIterator<Item = &'a Gaussian>,
    num_classes: usize,
    feature_dim: usize,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SIDECAR_MAGIC);
    for d in [gaussians.len(), num_classes, feature_dim] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for g in gaussians {
        assert_eq!(
            g.semantic_logits.len(),
            num_classes,
            "semantic logit length"
        );
        assert_eq!(g.feature.len(), feature_dim, "feature length");
        for v in g.semantic_logits.iter().chain(&g.feature) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Writes `path` and its sidecar.
pub fn write_map(
    path: &Path,
    gaussians: &[&Gaussian],
    num_classes: usize,
    feature_dim: usize,
) -> Result<()> {
    write_bytes(path, &encode_ply(gaussians.iter().copied()))?;
    write_bytes(
        &sidecar_path(path),
        &encode_sidecar(gaussians.iter().copied(), num_classes, feature_dim),
    )
}

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Parses the PLY part; semantic logits and features are left empty.
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<Vec<Gaussian>> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| malformed(path, "no end_header line"))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|_| malformed(path, "header is not UTF-8"))?;
    let body = &bytes[end + END.len()..];
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "ply",
        });
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", ..] => {
                return Err(malformed(path, format!("unsupported format line {line:?}")))
            }
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(malformed(path, "more than one vertex element"));
                }
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| malformed(path, format!("bad vertex count {n:?}")))?,
                );
            }
            ["element", ..] => {
                return Err(malformed(path, format!("unsupported element {line:?}")))
            }
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ..] => {
                return Err(malformed(path, format!("unsupported property {line:?}")))
            }
            ["comment", ..] | [] => {}
            _ => return Err(malformed(path, format!("unexpected header line {line:?}"))),
        }
    }
    if !format_ok {
        return Err(malformed(path, "missing format line"));
    }
    let count = count.ok_or_else(|| malformed(path, "missing vertex element"))?;
    let slots: Vec<usize> = PROPERTIES
        .iter()
        .map(|p| {
            props
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| malformed(path, format!("missing property {p}")))
        })
        .collect::<Result<_>>()?;
    let stride = props.len() * 4;
    let need = count
        .checked_mul(stride)
        .ok_or_else(|| malformed(path, "vertex count overflows"))?;
    if body.len() != need {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            msg: format!("vertex data is {} bytes, header implies {need}", body.len()),
        });
    }
    let mut out = Vec::with_capacity(count);
    for row in body.chunks_exact(stride.max(1)).take(count) {
        let f = |i: usize| {
            f32::from_le_bytes(
                row[slots[i] * 4..slots[i] * 4 + 4]
                    .try_into()
                    .expect("4 bytes"),
            ) as f64
        };
        out.push(Gaussian {
            position: Vec3::new(f(0), f(1), f(2)),
            log_scale: Vec3::new(f(3), f(4), f(5)),
            rotation: [f(6), f(7), f(8), f(9)],
            opacity_logit: f(10),
            color: Vec3::new(f(11), f(12), f(13)),
            semantic_logits: Vec::new(),
            feature: Vec::new(),
        });
    }
    Ok(out)
}

/// Parses a sidecar into `(L, N_d, rows)`.
pub fn parse_sidecar(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    if bytes.len() < 4 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "LVDG",
        });
    }
    if bytes.len() < 16 {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            msg: format!("header needs 16 bytes, file has {}", bytes.len()),
        });
    }
    let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (n, l, nd) = (u(4), u(8), u(12));
    let row = l + nd;
    let need = n
        .checked_mul(row)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| malformed(path, "sizes overflow"))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            msg: format!("payload is {} bytes, header implies {need}", body.len()),
        });
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let rows = if row == 0 {
        vec![Vec::new(); n]
    } else {
        vals.chunks(row).map(|c| c.to_vec()).collect()
    };
    Ok((l, nd, rows))
}

/// Reads a map written by [`write_map`]; returns the Gaussians with L and N_d.
pub fn read_map(path: &Path) -> Result<(Vec<Gaussian>, usize, usize)> {
    let mut gs = parse_ply(&read_bytes(path)?, path)?;
    let side = sidecar_path(path);
    let (l, nd, rows) = parse_sidecar(&read_bytes(&side)?, &side)?;
    if rows.len() != gs.len() {
        return Err(Error::dims(
            side.display().to_string(),
            format!("{} rows", gs.len()),
            format!("{} rows", rows.len()),
        ));
    }
    for (g, r) in gs.iter_mut().zip(rows) {
        g.semantic_logits = r[..l].to_vec();
        g.feature = r[l..].to_vec();
    }
    Ok((gs, l, nd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_round_trip_at_f32_precision() {
        let mut a = Gaussian::new(
            Vec3::new(1.0, -2.0, 3.5),
            0.25,
            Vec3::new(0.1, 0.2, 0.3),
            3,
            2,
        );
        a.semantic_logits = vec![1.0, -2.0, 10.0];
        a.feature = vec![0.5, -0.25];
        a.rotation = [0.5, 0.5, 0.5, 0.5];
        let b = Gaussian::new(
            Vec3::new(0.0, 0.0, 1.0),
            2.0,
            Vec3::new(1.0, 1.0, 1.0),
            3,
            2,
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.ply");
        write_map(&p, &[&a, &b], 3, 2).unwrap();
        let (back, l, nd) = read_map(&p).unwrap();
        assert_eq!((l, nd, back.len()), (3, 2, 2));
        assert_eq!(back[0].semantic_logits, a.semantic_logits);
        assert_eq!(back[0].feature, a.feature);
        assert_eq!(back[0].rotation, a.rotation);
        assert!((back[0].log_scale - a.log_scale).abs().max() < 1e-6);
        assert!((back[1].position - b.position).abs().max() < 1e-6);
    }

    #[test]
    fn empty_map() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.ply");
        write_map(&p, &[], 4, 8).unwrap();
        let (gs, l, nd) = read_map(&p).unwrap();
        assert!(gs.is_empty());
        assert_eq!((l, nd), (4, 8));
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("x.ply");
        assert!(parse_ply(b"ply\nend_header\n", p).is_err());
        assert!(parse_ply(b"nope\nend_header\n", p).is_err());
        assert!(parse_ply(b"ply\nformat ascii 1.0\nend_header\n", p).is_err());
        let g = Gaussian::new(Vec3::zeros(), 1.0, Vec3::zeros(), 1, 1);
        let bytes = encode_ply([&g].into_iter());
        assert!(matches!(
            parse_ply(&bytes[..bytes.len() - 1], p),
            Err(Error::TruncatedFile { .. })
        ));
        assert!(matches!(
            parse_sidecar(b"LVDX", p),
            Err(Error::BadMagic { .. })
        ));
    }
}
