#![allow(dead_code)]

use gsslam::gaussian_map::Gaussian;
use gsslam::geometry::{CameraIntrinsics, SE3Pose, Vec3};
use gsslam::raster::Image;
use gsslam::rasterizer::{project_gaussian, RenderSettings};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const NUM_CLASSES: usize = 3;
pub const FEATURE_DIM: usize = 4;

pub fn camera(w: usize, h: usize) -> CameraIntrinsics {
    let f = 0.9 * w as f64;
    CameraIntrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
}

/// Gaussians in front of an identity camera, inside the field of view.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, opacity: (f64, f64)) -> Vec<Gaussian> {
    (0..n)
        .map(|_| {
            let z = rng.gen_range(2.0..6.0);
            let pos = Vec3::new(
                rng.gen_range(-0.4..0.4) * z,
                rng.gen_range(-0.4..0.4) * z,
                z,
            );
            let mut g = Gaussian::new(pos, 0.1, Vec3::zeros(), NUM_CLASSES, FEATURE_DIM);
            g.log_scale = Vec3::new(
                rng.gen_range(-3.0..-1.2),
                rng.gen_range(-3.0..-1.2),
                rng.gen_range(-3.0..-1.2),
            );
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(0.1);
            g.rotation = q.map(|v| v / n);
            g.opacity_logit = rng.gen_range(opacity.0..opacity.1);
            g.color = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            g.semantic_logits = (0..NUM_CLASSES).map(|_| rng.gen_range(-2.0..2.0)).collect();
            g.feature = (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            g
        })
        .collect()
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_vec(
        w,
        h,
        c,
        (0..w * h * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub struct NaiveRender {
    pub color: Image,
    pub depth: Image,
    pub semantic_prob: Image,
    pub feature: Image,
    pub alpha: Image,
}

/// Per-pixel compositing over every projected Gaussian, with no tiling.
pub fn naive_render(
    gs: &[Gaussian],
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    s: &RenderSettings,
) -> NaiveRender {
    let (l, nd) = (NUM_CLASSES, FEATURE_DIM);
    let mut splats: Vec<_> = gs
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, i, pose, k, s))
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.index.cmp(&b.index))
    });
    let (w, h) = (k.width, k.height);
    let mut out = NaiveRender {
        color: Image::zeros(w, h, 3),
        depth: Image::zeros(w, h, 1),
        semantic_prob: Image::zeros(w, h, l),
        feature: Image::zeros(w, h, nd),
        alpha: Image::zeros(w, h, 1),
    };
    for row in 0..h {
        for col in 0..w {
            let (px, py) = (col as f64, row as f64);
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            let mut logits = vec![0.0; l];
            let mut feat = vec![0.0; nd];
            let (mut wsum, mut zsum) = (0.0, 0.0);
            for sp in &splats {
                let d = nalgebra::Vector2::new(px - sp.mean.x, py - sp.mean.y);
                let inv = sp.cov.try_inverse().unwrap();
                let a = (sp.opacity * (-0.5 * d.dot(&(inv * d))).exp()).min(s.max_alpha);
                if a < s.min_alpha || a <= 0.0 {
                    continue;
                }
                if t * (1.0 - a) < s.transmittance_floor {
                    break;
                }
                let wk = a * t;
                let g = &gs[sp.index];
                for c in 0..3 {
                    rgb[c] += wk * g.color[c];
                }
                for c in 0..l {
                    logits[c] += wk * g.semantic_logits[c];
                }
                for c in 0..nd {
                    feat[c] += wk * g.feature[c];
                }
                wsum += wk;
                zsum += wk * sp.depth;
                t *= 1.0 - a;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let es: f64 = e.iter().sum();
            for c in 0..3 {
                out.color.set(col, row, c, rgb[c]);
            }
            for c in 0..l {
                out.semantic_prob.set(col, row, c, e[c] / es);
            }
            for c in 0..nd {
                out.feature.set(col, row, c, feat[c]);
            }
            out.alpha.set(col, row, 0, wsum);
            out.depth
                .set(col, row, 0, if wsum > 0.0 { zsum / wsum } else { 0.0 });
        }
    }
    out
}

pub fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    assert!(a.same_shape(b));
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// SSIM by direct 11×11 windowed sums over every valid window position.
pub fn direct_ssim(a: &Image, b: &Image) -> f64 {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let sigma: f64 = 1.5;
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        let mut count = 0;
        for r0 in 0..=h - 11 {
            for c0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / total;
                        let x = a.get(c0 + j, r0 + i, c);
                        let y = b.get(c0 + j, r0 + i, c);
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / ch as f64
}
