use std::borrow::Borrow;

use rayon::prelude::*;

use crate::gaussian_map::Gaussian;
use crate::geometry::{CameraIntrinsics, SE3Pose};
use crate::raster::Image;

use super::project::{project_gaussian, Splat};
use super::RenderSettings;

/// Rendered channels plus the state retained for the backward pass.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: Image,
    /// Alpha-normalised expected depth; 0 where nothing contributes.
    pub depth: Image,
    pub semantic_prob: Image,
    pub feature: Image,
    pub alpha: Image,
    pub(crate) ctx: RenderContext,
}

#[derive(Clone, Debug)]
pub(crate) struct RenderContext {
    pub pose: SE3Pose,
    pub camera: CameraIntrinsics,
    pub settings: RenderSettings,
    pub num_gaussians: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Visible splats sorted by (depth, input index).
    pub splats: Vec<Splat>,
    pub colors: Vec<[f64; 3]>,
    /// Row-major `splats.len() × num_classes`.
    pub semantic: Vec<f64>,
    /// Row-major `splats.len() × feature_dim`.
    pub features: Vec<f64>,
    pub tiles_x: usize,
    /// Per tile, indices into `splats` in compositing order.
    pub tiles: Vec<Vec<u32>>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.ctx.camera.width
    }

    pub fn height(&self) -> usize {
        self.ctx.camera.height
    }

    pub fn num_classes(&self) -> usize {
        self.ctx.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.ctx.feature_dim
    }

    pub fn num_gaussians(&self) -> usize {
        self.ctx.num_gaussians
    }

    pub fn pose(&self) -> &SE3Pose {
        &self.ctx.pose
    }

    /// Per-pixel argmax class.
    pub fn semantic_argmax(&self) -> Vec<u8> {
        self.semantic_prob
            .data()
            .chunks(self.ctx.num_classes)
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0 as u8
            })
            .collect()
    }
}

/// One accepted contribution while compositing a pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    /// Index into `RenderContext::splats`.
    pub splat: usize,
    /// Position within the tile list.
    pub slot: usize,
    pub alpha: f64,
    /// Transmittance before this contribution.
    pub transmittance: f64,
    /// exp(power) of the 2D Gaussian.
    pub falloff: f64,
    pub clamped: bool,
    pub dx: f64,
    pub dy: f64,
}

impl RenderContext {
    /// Front-to-back compositing walk for pixel `(px, py)`, shared by both passes.
    pub fn walk_pixel(&self, tile: &[u32], px: f64, py: f64, mut visit: impl FnMut(&Contribution)) {
        let s = &self.settings;
        let mut t = 1.0;
        for (slot, &si) in tile.iter().enumerate() {
            let sp = &self.splats[si as usize];
            let dx = px - sp.mean.x;
            let dy = py - sp.mean.y;
            let power = -0.5
                * (sp.conic[(0, 0)] * dx * dx
                    + 2.0 * sp.conic[(0, 1)] * dx * dy
                    + sp.conic[(1, 1)] * dy * dy);
            let falloff = power.exp();
            let raw = sp.opacity * falloff;
            let clamped = raw > s.max_alpha;
            let alpha = if clamped { s.max_alpha } else { raw };
            if alpha < s.min_alpha || alpha <= 0.0 {
                continue;
            }
            let next = t * (1.0 - alpha);
            if next < s.transmittance_floor {
                break;
            }
            visit(&Contribution {
                splat: si as usize,
                slot,
                alpha,
                transmittance: t,
                falloff,
                clamped,
                dx,
                dy,
            });
            t = next;
        }
    }

    /// Pixel rectangle `(col0, row0, col1, row1)` (exclusive end) of a tile.
    pub fn tile_rect(&self, tile: usize) -> (usize, usize, usize, usize) {
        let ts = self.settings.tile_size;
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let c0 = tx * ts;
        let r0 = ty * ts;
        (
            c0,
            r0,
            (c0 + ts).min(self.camera.width),
            (r0 + ts).min(self.camera.height),
        )
    }
}

/// Renders with default settings; channel counts come from the first Gaussian.
pub fn render<G: Borrow<Gaussian> + Sync>(
    gaussians: &[G],
    pose: &SE3Pose,
    k: &CameraIntrinsics,
) -> RenderOutput {
    let (l, nd) = gaussians
        .first()
        .map(|g| {
            let g = g.borrow();
            (g.semantic_logits.len().max(1), g.feature.len().max(1))
        })
        .unwrap_or((1, 1));
    render_with(gaussians, pose, k, &RenderSettings::default(), l, nd)
}

/// Renders `gaussians` seen from the camera-to-world `pose`.
pub fn render_with<G: Borrow<Gaussian> + Sync>(
    gaussians: &[G],
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    settings: &RenderSettings,
    num_classes: usize,
    feature_dim: usize,
) -> RenderOutput {
    assert!(
        k.width > 0 && k.height > 0,
        "render needs a non-empty image"
    );
    let mut splats: Vec<Splat> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g.borrow(), i, pose, k, settings))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let mut colors = Vec::with_capacity(splats.len());
    let mut semantic = Vec::with_capacity(splats.len() * num_classes);
    let mut features = Vec::with_capacity(splats.len() * feature_dim);
    for sp in &splats {
        let g = gaussians[sp.index].borrow();
        colors.push([g.color.x, g.color.y, g.color.z]);
        assert_eq!(
            g.semantic_logits.len(),
            num_classes,
            "semantic logit length"
        );
        assert_eq!(g.feature.len(), feature_dim, "feature length");
        semantic.extend_from_slice(&g.semantic_logits);
        features.extend_from_slice(&g.feature);
    }

    let ts = settings.tile_size;
    let tiles_x = k.width.div_ceil(ts);
    let tiles_y = k.height.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, sp) in splats.iter().enumerate() {
        let r = sp.radius;
        let (c0, c1, r0, r1) = if r.is_finite() {
            let lo_x = ((sp.mean.x - r).ceil().max(0.0)) as usize;
            let hi_x = (sp.mean.x + r).floor();
            let lo_y = ((sp.mean.y - r).ceil().max(0.0)) as usize;
            let hi_y = (sp.mean.y + r).floor();
            if hi_x < 0.0 || hi_y < 0.0 || lo_x >= k.width || lo_y >= k.height {
                continue;
            }
            let hi_x = (hi_x as usize).min(k.width - 1);
            let hi_y = (hi_y as usize).min(k.height - 1);
            if lo_x > hi_x || lo_y > hi_y {
                continue;
            }
            (lo_x / ts, hi_x / ts, lo_y / ts, hi_y / ts)
        } else {
            (0, tiles_x - 1, 0, tiles_y - 1)
        };
        for ty in r0..=r1 {
            for tx in c0..=c1 {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    let ctx = RenderContext {
        pose: *pose,
        camera: *k,
        settings: *settings,
        num_gaussians: gaussians.len(),
        num_classes,
        feature_dim,
        splats,
        colors,
        semantic,
        features,
        tiles_x,
        tiles,
    };

    let (w, h) = (k.width, k.height);
    let mut color = Image::zeros(w, h, 3);
    let mut depth = Image::zeros(w, h, 1);
    let mut semantic_prob = Image::zeros(w, h, num_classes);
    let mut feature = Image::zeros(w, h, feature_dim);
    let mut alpha = Image::zeros(w, h, 1);

    let per_tile: Vec<Vec<PixelOut>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| shade_tile(&ctx, tile))
        .collect();

    for (tile, pixels) in per_tile.into_iter().enumerate() {
        let (c0, r0, c1, _) = ctx.tile_rect(tile);
        let tw = c1 - c0;
        for (j, p) in pixels.into_iter().enumerate() {
            let i = (r0 + j / tw) * w + c0 + j % tw;
            color.px_mut(i).copy_from_slice(&p.color);
            depth.data_mut()[i] = p.depth;
            alpha.data_mut()[i] = p.alpha;
            semantic_prob.px_mut(i).copy_from_slice(&p.semantic);
            feature.px_mut(i).copy_from_slice(&p.feature);
        }
    }

    RenderOutput {
        color,
        depth,
        semantic_prob,
        feature,
        alpha,
        ctx,
    }
}

struct PixelOut {
    color: [f64; 3],
    depth: f64,
    alpha: f64,
    semantic: Vec<f64>,
    feature: Vec<f64>,
}

fn shade_tile(ctx: &RenderContext, tile: usize) -> Vec<PixelOut> {
    let (c0, r0, c1, r1) = ctx.tile_rect(tile);
    let list = &ctx.tiles[tile];
    let (l, nd) = (ctx.num_classes, ctx.feature_dim);
    let mut out = Vec::with_capacity((c1 - c0) * (r1 - r0));
    for row in r0..r1 {
        for col in c0..c1 {
            let mut color = [0.0; 3];
            let mut logits = vec![0.0; l];
            let mut feature = vec![0.0; nd];
            let mut acc_w = 0.0;
            let mut acc_z = 0.0;
            ctx.walk_pixel(list, col as f64, row as f64, |c| {
                let wgt = c.alpha * c.transmittance;
                let rgb = &ctx.colors[c.splat];
                for ch in 0..3 {
                    color[ch] += wgt * rgb[ch];
                }
                for (o, v) in logits
                    .iter_mut()
                    .zip(&ctx.semantic[c.splat * l..(c.splat + 1) * l])
                {
                    *o += wgt * v;
                }
                for (o, v) in feature
                    .iter_mut()
                    .zip(&ctx.features[c.splat * nd..(c.splat + 1) * nd])
                {
                    *o += wgt * v;
                }
                acc_w += wgt;
                acc_z += wgt * ctx.splats[c.splat].depth;
            });
            out.push(PixelOut {
                color,
                depth: if acc_w > 0.0 { acc_z / acc_w } else { 0.0 },
                alpha: acc_w,
                semantic: softmax(&logits),
                feature,
            });
        }
    }
    out
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
