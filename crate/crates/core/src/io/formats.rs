//! Binary and image asset formats.
//!
//! | asset    | layout                                                    |
//! |----------|-----------------------------------------------------------|
//! | scan     | little-endian f32 quadruples `x y z intensity`            |
//! | features | `"LVDF"`, u32 H, u32 W, u32 N_d, row-major f32 LE         |
//! | depth    | u32 H, u32 W, row-major f32 LE metres, 0 = invalid        |
//! | colour   | 8-bit RGB PNG                                             |
//! | labels   | 8-bit grey PNG, 255 = ignore                              |
//! | masks    | 8-bit grey PNG, 0 static, 255 dynamic                     |

use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::raster::{Image, LabelMap, Mask};

pub const FEATURE_MAGIC: &[u8; 4] = b"LVDF";

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn f32s(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
}

/// Reads a KITTI-style velodyne scan.
pub fn load_scan(path: &Path) -> Result<PointCloud> {
    parse_scan(&read_bytes(path)?, path)
}

pub fn parse_scan(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedScan {
            path: path.to_path_buf(),
            len: bytes.len(),
        });
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for q in bytes.chunks_exact(16) {
        let v: Vec<f64> = f32s(q).collect();
        points.push(Vec3::new(v[0], v[1], v[2]));
        intensity.push(v[3]);
    }
    Ok(PointCloud::with_intensity(points, intensity))
}

pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        let it = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p.x, p.y, p.z, it] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_bytes(path, &encode_scan(cloud))
}

fn payload_len(path: &Path, dims: &[u32]) -> Result<usize> {
    dims.iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("dimensions {dims:?} overflow"),
        })
}

/// Reads an `LVDF` feature map.
pub fn load_feature_map(path: &Path) -> Result<Image> {
    parse_feature_map(&read_bytes(path)?, path)
}

pub fn parse_feature_map(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "LVDF",
        });
    }
    if bytes.len() < 16 {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            msg: format!("header needs 16 bytes, file has {}", bytes.len()),
        });
    }
    let (h, w, nd) = (u32_at(bytes, 4), u32_at(bytes, 8), u32_at(bytes, 12));
    if h == 0 || w == 0 || nd == 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("zero dimension in {h}x{w}x{nd}"),
        });
    }
    let need = payload_len(path, &[h, w, nd])?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            msg: format!("payload is {} bytes, header implies {need}", body.len()),
        });
    }
    Image::from_vec(w as usize, h as usize, nd as usize, f32s(body).collect())
}

pub fn encode_feature_map(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for d in [img.height(), img.width(), img.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_feature_map(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_feature_map(img))
}

/// Reads a single-channel float depth map.
pub fn load_depth(path: &Path) -> Result<Image> {
    parse_depth(&read_bytes(path)?, path)
}

pub fn parse_depth(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            msg: format!("header needs 8 bytes, file has {}", bytes.len()),
        });
    }
    let (h, w) = (u32_at(bytes, 0), u32_at(bytes, 4));
    if h == 0 || w == 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("zero dimension in {h}x{w}"),
        });
    }
    let need = payload_len(path, &[h, w])?;
    let body = &bytes[8..];
    if body.len() != need {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            msg: format!("payload is {} bytes, header implies {need}", body.len()),
        });
    }
    Image::from_vec(w as usize, h as usize, 1, f32s(body).collect())
}

pub fn encode_depth(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + img.data().len() * 4);
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    for v in img.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_depth(path: &Path, img: &Image) -> Result<()> {
    assert_eq!(img.channels(), 1, "depth maps are single-channel");
    write_bytes(path, &encode_depth(img))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn save_png(path: &Path, img: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    img(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    })
}

/// Reads an 8-bit PNG as RGB in [0, 1].
pub fn load_color(path: &Path) -> Result<Image> {
    parse_color(&read_bytes(path)?, path)
}

pub fn parse_color(bytes: &[u8], path: &Path) -> Result<Image> {
    let rgb = decode_png(bytes, path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / 255.0)
        .collect();
    Image::from_vec(w as usize, h as usize, 3, data)
}

pub fn color_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_color(path: &Path, img: &Image) -> Result<()> {
    assert_eq!(img.channels(), 3, "colour images have three channels");
    let raw = img.data().iter().map(|v| color_to_u8(*v)).collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer size matches");
    save_png(path, |p| buf.save_with_format(p, ImageFormat::Png))
}

fn load_gray(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let g = decode_png(bytes, path)?.to_luma8();
    let (w, h) = g.dimensions();
    Ok((w as usize, h as usize, g.into_raw()))
}

fn write_gray(path: &Path, w: usize, h: usize, raw: Vec<u8>) -> Result<()> {
    let buf = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    save_png(path, |p| buf.save_with_format(p, ImageFormat::Png))
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    parse_labels(&read_bytes(path)?, path)
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let (w, h, raw) = load_gray(bytes, path)?;
    LabelMap::from_vec(w, h, raw)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_gray(
        path,
        labels.width(),
        labels.height(),
        labels.data().to_vec(),
    )
}

/// Reads a mask; any non-zero pixel is dynamic.
pub fn load_mask(path: &Path) -> Result<Mask> {
    parse_mask(&read_bytes(path)?, path)
}

pub fn parse_mask(bytes: &[u8], path: &Path) -> Result<Mask> {
    let (w, h, raw) = load_gray(bytes, path)?;
    Mask::from_vec(w, h, raw.into_iter().map(|v| v != 0).collect())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let raw = mask
        .data()
        .iter()
        .map(|&m| if m { 255 } else { 0 })
        .collect();
    write_gray(path, mask.width(), mask.height(), raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_examples() {
        let p = Path::new("scan.bin");
        assert!(parse_scan(&[], p).unwrap().is_empty());
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, -4.0, 0.25, 8.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = parse_scan(&bytes, p).unwrap();
        assert_eq!(
            c.points,
            vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.0, 0.25, 8.0)]
        );
        assert_eq!(c.intensity, Some(vec![0.5, 1.0]));
        assert_eq!(encode_scan(&c), bytes);
        assert!(matches!(
            parse_scan(&[0u8; 17], p),
            Err(Error::MalformedScan { len: 17, .. })
        ));
    }

    #[test]
    fn feature_round_trip_and_errors() {
        let p = Path::new("f.lvdf");
        let img =
            Image::from_vec(2, 2, 3, (0..12).map(|i| i as f64 * 0.5 - 1.0).collect()).unwrap();
        let bytes = encode_feature_map(&img);
        assert_eq!(parse_feature_map(&bytes, p).unwrap(), img);
        assert_eq!(
            encode_feature_map(&parse_feature_map(&bytes, p).unwrap()),
            bytes
        );
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            parse_feature_map(&bad, p),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            parse_feature_map(&bytes[..bytes.len() - 3], p),
            Err(Error::TruncatedFile { .. })
        ));
        assert!(matches!(
            parse_feature_map(&bytes[..10], p),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn depth_round_trip() {
        let p = Path::new("d.depth");
        let img = Image::from_vec(3, 2, 1, vec![0.0, 1.5, 2.25, 80.0, 0.0, 3.0]).unwrap();
        assert_eq!(parse_depth(&encode_depth(&img), p).unwrap(), img);
        assert!(parse_depth(&[1, 0, 0, 0, 1, 0, 0, 0, 0], p).is_err());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mask::new(5, 3);
        m.set(1, 2, true);
        let mp = dir.path().join("m.png");
        write_mask(&mp, &m).unwrap();
        assert_eq!(load_mask(&mp).unwrap(), m);

        let l = LabelMap::from_vec(2, 2, vec![0, 3, 255, 1]).unwrap();
        let lp = dir.path().join("l.png");
        write_labels(&lp, &l).unwrap();
        assert_eq!(load_labels(&lp).unwrap(), l);

        let c = Image::from_vec(2, 1, 3, vec![0.0, 1.0, 0.2, 51.0 / 255.0, 0.5, 1.0]).unwrap();
        let cp = dir.path().join("c.png");
        write_color(&cp, &c).unwrap();
        let back = load_color(&cp).unwrap();
        assert!(back
            .data()
            .iter()
            .zip(c.data())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        assert!(matches!(
            load_mask(&dir.path().join("missing.png")),
            Err(Error::MissingFile(_))
        ));
    }
}
