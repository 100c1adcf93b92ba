use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Tangent, Vec3};
use crate::raster::Image;

use super::forward::{RenderContext, RenderOutput};
use super::project::{project_backward, SplatGrad};

/// Upstream gradients of a scalar loss w.r.t. the rendered channels.
/// `None` means zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputGrads {
    pub color: Option<Image>,
    pub depth: Option<Image>,
    pub semantic_prob: Option<Image>,
    pub feature: Option<Image>,
    pub alpha: Option<Image>,
}

/// Per-Gaussian parameter gradients, indexed like the render input.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub position: Vec<Vec3>,
    pub log_scale: Vec<Vec3>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vec3>,
    pub semantic_logits: Vec<Vec<f64>>,
    pub feature: Vec<Vec<f64>>,
    /// Gradient for a right perturbation `pose ∘ exp(δ)`, ordered (ρ, φ).
    pub pose: Tangent,
}

impl RenderGrads {
    pub fn zeros(n: usize, num_classes: usize, feature_dim: usize) -> Self {
        Self {
            position: vec![Vec3::zeros(); n],
            log_scale: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            semantic_logits: vec![vec![0.0; num_classes]; n],
            feature: vec![vec![0.0; feature_dim]; n],
            pose: Tangent::zeros(),
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        let v3 = |v: &Vec<Vec3>| v.iter().all(|x| x.iter().all(|c| c.is_finite()));
        v3(&self.position)
            && v3(&self.log_scale)
            && v3(&self.color)
            && self.rotation.iter().flatten().all(|c| c.is_finite())
            && self.opacity_logit.iter().all(|c| c.is_finite())
            && self.semantic_logits.iter().flatten().all(|c| c.is_finite())
            && self.feature.iter().flatten().all(|c| c.is_finite())
            && self.pose.iter().all(|c| c.is_finite())
    }
}

/// Accumulated gradient for one splat inside one tile.
#[derive(Clone, Debug)]
struct SlotGrad {
    geom: SplatGrad,
    color: [f64; 3],
    semantic: Vec<f64>,
    feature: Vec<f64>,
}

/// Reverse-mode pass through compositing, splat evaluation and projection.
///
/// With `detach_semantic_weights` the semantic channel only reaches
/// `semantic_logits`; the compositing weights see no gradient from it.
pub fn render_backward(
    out: &RenderOutput,
    grads: &OutputGrads,
    detach_semantic_weights: bool,
) -> Result<RenderGrads> {
    let ctx = &out.ctx;
    let (w, h) = (ctx.camera.width, ctx.camera.height);
    let check = |img: &Option<Image>, what: &str, ch: usize| -> Result<()> {
        match img {
            Some(i) if i.width() != w || i.height() != h || i.channels() != ch => {
                Err(Error::StateMismatch(format!(
                    "{what} gradient is {}x{}x{}, render is {w}x{h}x{ch}",
                    i.width(),
                    i.height(),
                    i.channels()
                )))
            }
            _ => Ok(()),
        }
    };
    check(&grads.color, "color", 3)?;
    check(&grads.depth, "depth", 1)?;
    check(&grads.semantic_prob, "semantic", ctx.num_classes)?;
    check(&grads.feature, "feature", ctx.feature_dim)?;
    check(&grads.alpha, "alpha", 1)?;

    let per_tile: Vec<Vec<SlotGrad>> = (0..ctx.tiles.len())
        .into_par_iter()
        .map(|tile| backward_tile(out, grads, tile, detach_semantic_weights))
        .collect();

    let (l, nd) = (ctx.num_classes, ctx.feature_dim);
    let ns = ctx.splats.len();
    let mut acc: Vec<SlotGrad> = vec![
        SlotGrad {
            geom: SplatGrad::default(),
            color: [0.0; 3],
            semantic: vec![0.0; l],
            feature: vec![0.0; nd],
        };
        ns
    ];
    for (tile, slots) in per_tile.iter().enumerate() {
        for (slot, g) in slots.iter().enumerate() {
            let a = &mut acc[ctx.tiles[tile][slot] as usize];
            a.geom.mean += g.geom.mean;
            a.geom.conic += g.geom.conic;
            a.geom.opacity += g.geom.opacity;
            a.geom.depth += g.geom.depth;
            for c in 0..3 {
                a.color[c] += g.color[c];
            }
            for (x, y) in a.semantic.iter_mut().zip(&g.semantic) {
                *x += y;
            }
            for (x, y) in a.feature.iter_mut().zip(&g.feature) {
                *x += y;
            }
        }
    }

    let geom: Vec<_> = ctx
        .splats
        .par_iter()
        .zip(acc.par_iter())
        .map(|(s, a)| {
            let g = &a.geom;
            let idle = g.mean.iter().chain(g.conic.iter()).all(|v| *v == 0.0)
                && g.opacity == 0.0
                && g.depth == 0.0;
            (!idle).then(|| project_backward(s, g, &ctx.pose, &ctx.camera))
        })
        .collect();

    let mut res = RenderGrads::zeros(ctx.num_gaussians, l, nd);
    for ((s, a), g) in ctx.splats.iter().zip(acc).zip(geom) {
        let i = s.index;
        res.color[i] = Vec3::new(a.color[0], a.color[1], a.color[2]);
        res.semantic_logits[i] = a.semantic;
        res.feature[i] = a.feature;
        let Some(g) = g else { continue };
        res.position[i] = g.position;
        res.log_scale[i] = g.log_scale;
        res.rotation[i] = g.rotation;
        res.opacity_logit[i] = g.opacity_logit;
        for (k, v) in g.pose.iter().enumerate() {
            res.pose[k] += v;
        }
    }
    Ok(res)
}

fn backward_tile(
    out: &RenderOutput,
    grads: &OutputGrads,
    tile: usize,
    detach: bool,
) -> Vec<SlotGrad> {
    let ctx: &RenderContext = &out.ctx;
    let list = &ctx.tiles[tile];
    let (l, nd) = (ctx.num_classes, ctx.feature_dim);
    let mut slots = vec![
        SlotGrad {
            geom: SplatGrad::default(),
            color: [0.0; 3],
            semantic: vec![0.0; l],
            feature: vec![0.0; nd],
        };
        list.len()
    ];
    if list.is_empty() {
        return slots;
    }
    let (c0, r0, c1, r1) = ctx.tile_rect(tile);
    let w = ctx.camera.width;
    let mut contribs = Vec::new();
    let mut g_logit = vec![0.0; l];
    for row in r0..r1 {
        for col in c0..c1 {
            let i = row * w + col;
            let g_c = grads.color.as_ref().map(|g| g.px(i));
            let g_f = grads.feature.as_ref().map(|g| g.px(i));
            let g_d = grads.depth.as_ref().map_or(0.0, |g| g.data()[i]);
            let g_a = grads.alpha.as_ref().map_or(0.0, |g| g.data()[i]);
            let has_sem = match grads.semantic_prob.as_ref() {
                Some(g) => {
                    let gp = g.px(i);
                    if gp.iter().all(|v| *v == 0.0) {
                        false
                    } else {
                        semantic_logit_grad(out, i, gp, &mut g_logit);
                        true
                    }
                }
                None => false,
            };
            let zero_c = g_c.is_none_or(|g| g.iter().all(|v| *v == 0.0));
            let zero_f = g_f.is_none_or(|g| g.iter().all(|v| *v == 0.0));
            if zero_c && zero_f && g_d == 0.0 && g_a == 0.0 && !has_sem {
                continue;
            }

            contribs.clear();
            ctx.walk_pixel(list, col as f64, row as f64, |c| contribs.push(*c));
            if contribs.is_empty() {
                continue;
            }
            let acc_a: f64 = contribs.iter().map(|c| c.alpha * c.transmittance).sum();
            let depth = out.depth.data()[i];

            // suffix = Σ_{m>k} gw_m · w_m
            let mut suffix = 0.0;
            for c in contribs.iter().rev() {
                let wk = c.alpha * c.transmittance;
                let slot = &mut slots[c.slot];
                let mut g_w = g_a;
                if let Some(g) = g_c {
                    let rgb = &ctx.colors[c.splat];
                    for ch in 0..3 {
                        g_w += g[ch] * rgb[ch];
                        slot.color[ch] += g[ch] * wk;
                    }
                }
                if let Some(g) = g_f {
                    let f = &ctx.features[c.splat * nd..(c.splat + 1) * nd];
                    for j in 0..nd {
                        g_w += g[j] * f[j];
                        slot.feature[j] += g[j] * wk;
                    }
                }
                if has_sem {
                    let s = &ctx.semantic[c.splat * l..(c.splat + 1) * l];
                    for j in 0..l {
                        if !detach {
                            g_w += g_logit[j] * s[j];
                        }
                        slot.semantic[j] += g_logit[j] * wk;
                    }
                }
                if g_d != 0.0 && acc_a > 0.0 {
                    let z = ctx.splats[c.splat].depth;
                    g_w += g_d * (z - depth) / acc_a;
                    slot.geom.depth += g_d * wk / acc_a;
                }

                let g_alpha = c.transmittance * g_w - suffix / (1.0 - c.alpha);
                suffix += g_w * wk;
                if c.clamped {
                    continue;
                }
                let sp = &ctx.splats[c.splat];
                slot.geom.opacity += g_alpha * c.falloff;
                let g_power = g_alpha * sp.opacity * c.falloff;
                let q = &sp.conic;
                slot.geom.mean += Vector2::new(
                    g_power * (q[(0, 0)] * c.dx + q[(0, 1)] * c.dy),
                    g_power * (q[(1, 0)] * c.dx + q[(1, 1)] * c.dy),
                );
                slot.geom.conic += Matrix2::new(c.dx * c.dx, c.dx * c.dy, c.dx * c.dy, c.dy * c.dy)
                    * (-0.5 * g_power);
            }
        }
    }
    slots
}

/// Chains a gradient on softmax probabilities back to the composited logits.
fn semantic_logit_grad(out: &RenderOutput, i: usize, g_prob: &[f64], g_logit: &mut [f64]) {
    let p = out.semantic_prob.px(i);
    let dot: f64 = p.iter().zip(g_prob).map(|(a, b)| a * b).sum();
    for j in 0..p.len() {
        g_logit[j] = p[j] * (g_prob[j] - dot);
    }
}
