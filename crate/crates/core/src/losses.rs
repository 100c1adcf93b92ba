//! Photometric, geometric, semantic and feature losses against frame assets.
//!
//! Every loss takes a mask whose set pixels are excluded. [`evaluate`] computes
//! the weighted total together with the gradient maps needed by
//! [`render_backward`](crate::rasterizer::render_backward).

use crate::error::{Error, Result};
use crate::pipeline::FrameBundle;
use crate::raster::{Image, LabelMap, Mask, IGNORE_LABEL};
use crate::rasterizer::{OutputGrads, RenderOutput};

const PROB_FLOOR: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_dino: f64,
    pub lambda_c: f64,
    pub lambda_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 0.1,
            lambda_dino: 0.1,
            lambda_c: 0.8,
            lambda_depth: 0.2,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_s: f64, lambda_dino: f64, lambda_c: f64, lambda_depth: f64) -> Result<Self> {
        let w = Self {
            lambda_s,
            lambda_dino,
            lambda_c,
            lambda_depth,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_dino", self.lambda_dino),
            ("lambda_c", self.lambda_c),
            ("lambda_depth", self.lambda_depth),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config {
                    key: key.into(),
                    msg: format!("weight must be finite and non-negative, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// Colour and depth terms only.
    pub fn color_depth_only(&self) -> Self {
        Self {
            lambda_s: 0.0,
            lambda_dino: 0.0,
            ..*self
        }
    }
}

/// Weights of the per-pixel residual used for motion detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyWeights {
    pub lambda_dino: f64,
    pub lambda_depth: f64,
}

impl Default for UncertaintyWeights {
    fn default() -> Self {
        Self {
            lambda_dino: 1.0,
            lambda_depth: 0.5,
        }
    }
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_c: f64,
    pub l_depth: f64,
    pub l_s: f64,
    pub l_dino: f64,
    pub valid_pixel_count: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_c: f64,
    pub l_depth: f64,
    pub l_s: f64,
    pub l_dino: f64,
    pub total: f64,
    pub valid_pixel_count: usize,
}

/// Ground-truth assets a render is compared against.
#[derive(Clone, Copy, Debug)]
pub struct LossTargets<'a> {
    pub color: &'a Image,
    pub depth: &'a Image,
    pub labels: &'a LabelMap,
    pub features: &'a Image,
}

impl<'a> LossTargets<'a> {
    pub fn from_frame(frame: &'a FrameBundle) -> Self {
        Self {
            color: &frame.image,
            depth: &frame.dense_depth,
            labels: &frame.semantic_labels,
            features: &frame.features,
        }
    }
}

fn check_image(what: &str, img: &Image, render: &RenderOutput, channels: usize) -> Result<()> {
    if img.width() != render.width()
        || img.height() != render.height()
        || img.channels() != channels
    {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {}x{}x{}, render is {}x{}x{channels}",
            img.width(),
            img.height(),
            img.channels(),
            render.width(),
            render.height()
        )));
    }
    Ok(())
}

fn check_mask(mask: &Mask, render: &RenderOutput) -> Result<()> {
    if !mask.same_size(render.width(), render.height()) {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, render is {}x{}",
            mask.width(),
            mask.height(),
            render.width(),
            render.height()
        )));
    }
    Ok(())
}

fn check_labels(labels: &LabelMap, render: &RenderOutput) -> Result<()> {
    if !labels.same_size(render.width(), render.height()) {
        return Err(Error::ShapeMismatch(format!(
            "label map is {}x{}, render is {}x{}",
            labels.width(),
            labels.height(),
            render.width(),
            render.height()
        )));
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> Option<(f64, f64, f64)> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb), na, nb))
}

/// Mean L1 colour error (over pixels and channels) and mean absolute depth error
/// over unmasked pixels. Depth ignores pixels whose ground truth is not positive.
pub fn color_depth_loss(
    render: &RenderOutput,
    gt_color: &Image,
    gt_depth: &Image,
    mask: &Mask,
) -> Result<(f64, f64)> {
    check_image("gt color", gt_color, render, 3)?;
    check_image("gt depth", gt_depth, render, 1)?;
    check_mask(mask, render)?;
    let (mut sum_c, mut n) = (0.0, 0usize);
    let (mut sum_d, mut nd) = (0.0, 0usize);
    for (i, &masked) in mask.data().iter().enumerate() {
        if masked {
            continue;
        }
        n += 1;
        sum_c += render
            .color
            .px(i)
            .iter()
            .zip(gt_color.px(i))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        let d = gt_depth.data()[i];
        if d > 0.0 {
            nd += 1;
            sum_d += (render.depth.data()[i] - d).abs();
        }
    }
    if n == 0 {
        return Err(Error::EmptyPixelSet);
    }
    let l_depth = if nd > 0 { sum_d / nd as f64 } else { 0.0 };
    Ok((sum_c / (3 * n) as f64, l_depth))
}

/// Mean negative log-probability of the ground-truth class.
pub fn semantic_loss(render: &RenderOutput, gt_labels: &LabelMap, mask: &Mask) -> Result<f64> {
    check_labels(gt_labels, render)?;
    check_mask(mask, render)?;
    let l = render.num_classes();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (&masked, &label)) in mask.data().iter().zip(gt_labels.data()).enumerate() {
        if masked || label == IGNORE_LABEL || label as usize >= l {
            continue;
        }
        n += 1;
        sum -= render.semantic_prob.px(i)[label as usize]
            .max(PROB_FLOOR)
            .ln();
    }
    if n == 0 {
        return Err(Error::EmptyPixelSet);
    }
    Ok(sum / n as f64)
}

/// Mean cosine distance between rendered and ground-truth features.
pub fn dino_loss(render: &RenderOutput, gt_features: &Image, mask: &Mask) -> Result<f64> {
    check_image("gt features", gt_features, render, render.feature_dim())?;
    check_mask(mask, render)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &masked) in mask.data().iter().enumerate() {
        if masked {
            continue;
        }
        n += 1;
        sum += cosine(render.feature.px(i), gt_features.px(i)).map_or(1.0, |(c, _, _)| 1.0 - c);
    }
    if n == 0 {
        return Err(Error::EmptyPixelSet);
    }
    Ok(sum / n as f64)
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> LossReport {
    LossReport {
        l_c: parts.l_c,
        l_depth: parts.l_depth,
        l_s: parts.l_s,
        l_dino: parts.l_dino,
        total: weights.lambda_s * parts.l_s
            + weights.lambda_dino * parts.l_dino
            + weights.lambda_c * parts.l_c
            + weights.lambda_depth * parts.l_depth,
        valid_pixel_count: parts.valid_pixel_count,
    }
}

/// Per-pixel motion residual `λ'_dino (1 − cos) + λ'_depth |ΔD|` (single channel).
pub fn residual_map(
    render: &RenderOutput,
    frame: &FrameBundle,
    w: &UncertaintyWeights,
) -> Result<Image> {
    check_image("gt features", &frame.features, render, render.feature_dim())?;
    check_image("gt depth", &frame.dense_depth, render, 1)?;
    let mut u = Image::zeros(render.width(), render.height(), 1);
    for (i, out) in u.data_mut().iter_mut().enumerate() {
        let f = cosine(render.feature.px(i), frame.features.px(i)).map_or(1.0, |(c, _, _)| 1.0 - c);
        let mut v = w.lambda_dino * f;
        let d = frame.dense_depth.data()[i];
        if d > 0.0 {
            v += w.lambda_depth * (render.depth.data()[i] - d).abs();
        }
        *out = v;
    }
    Ok(u)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weighted loss and its gradient w.r.t. the rendered channels.
///
/// Terms with zero weight are skipped. A semantic term with no labelled pixel
/// contributes zero instead of failing.
pub fn evaluate(
    render: &RenderOutput,
    targets: &LossTargets<'_>,
    mask: &Mask,
    weights: &LossWeights,
) -> Result<(LossReport, OutputGrads)> {
    let (w, h) = (render.width(), render.height());
    check_image("gt color", targets.color, render, 3)?;
    check_image("gt depth", targets.depth, render, 1)?;
    check_image(
        "gt features",
        targets.features,
        render,
        render.feature_dim(),
    )?;
    check_labels(targets.labels, render)?;
    check_mask(mask, render)?;

    let n = mask.data().iter().filter(|m| !**m).count();
    if n == 0 {
        return Err(Error::EmptyPixelSet);
    }
    let mut parts = LossParts {
        valid_pixel_count: n,
        ..Default::default()
    };
    let mut grads = OutputGrads::default();

    if weights.lambda_c > 0.0 || weights.lambda_depth > 0.0 {
        let (l_c, l_depth) = color_depth_loss(render, targets.color, targets.depth, mask)?;
        parts.l_c = l_c;
        parts.l_depth = l_depth;
    }
    if weights.lambda_c > 0.0 {
        let scale = weights.lambda_c / (3 * n) as f64;
        let mut g = Image::zeros(w, h, 3);
        for (i, &masked) in mask.data().iter().enumerate() {
            if masked {
                continue;
            }
            let (r, t) = (render.color.px(i), targets.color.px(i));
            for (o, (a, b)) in g.px_mut(i).iter_mut().zip(r.iter().zip(t)) {
                *o = scale * sign(a - b);
            }
        }
        grads.color = Some(g);
    }
    if weights.lambda_depth > 0.0 {
        let valid = |i: usize| !mask.data()[i] && targets.depth.data()[i] > 0.0;
        let nd = (0..w * h).filter(|&i| valid(i)).count();
        if nd > 0 {
            let scale = weights.lambda_depth / nd as f64;
            let mut g = Image::zeros(w, h, 1);
            for (i, o) in g.data_mut().iter_mut().enumerate() {
                if valid(i) {
                    *o = scale * sign(render.depth.data()[i] - targets.depth.data()[i]);
                }
            }
            grads.depth = Some(g);
        }
    }
    if weights.lambda_s > 0.0 {
        match semantic_loss(render, targets.labels, mask) {
            Ok(l_s) => {
                parts.l_s = l_s;
                let l = render.num_classes();
                let ns = mask
                    .data()
                    .iter()
                    .zip(targets.labels.data())
                    .filter(|(m, lab)| !**m && **lab != IGNORE_LABEL && (**lab as usize) < l)
                    .count();
                let scale = weights.lambda_s / ns as f64;
                let mut g = Image::zeros(w, h, l);
                for (i, (&masked, &label)) in
                    mask.data().iter().zip(targets.labels.data()).enumerate()
                {
                    if masked || label == IGNORE_LABEL || label as usize >= l {
                        continue;
                    }
                    let p = render.semantic_prob.px(i)[label as usize];
                    if p > PROB_FLOOR {
                        g.px_mut(i)[label as usize] = -scale / p;
                    }
                }
                grads.semantic_prob = Some(g);
            }
            Err(Error::EmptyPixelSet) => {}
            Err(e) => return Err(e),
        }
    }
    if weights.lambda_dino > 0.0 {
        let nd = render.feature_dim();
        let scale = weights.lambda_dino / n as f64;
        let mut g = Image::zeros(w, h, nd);
        let mut sum = 0.0;
        for (i, &masked) in mask.data().iter().enumerate() {
            if masked {
                continue;
            }
            let (fr, ft) = (render.feature.px(i), targets.features.px(i));
            match cosine(fr, ft) {
                Some((c, nr, nt)) => {
                    sum += 1.0 - c;
                    for (j, o) in g.px_mut(i).iter_mut().enumerate() {
                        let dc = ft[j] / (nr * nt) - c * fr[j] / (nr * nr);
                        *o = -scale * dc;
                    }
                }
                None => sum += 1.0,
            }
        }
        parts.l_dino = sum / n as f64;
        grads.feature = Some(g);
    }
    Ok((total_loss(&parts, weights), grads))
}
