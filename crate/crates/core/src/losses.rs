//! Soft segmentation losses on foreground probability maps.
//!
//! Probabilities and targets are flat `[B, H, W]` buffers. Region losses
//! (Dice, focal Tversky) pool their soft counts over the whole batch; the
//! boundary loss averages over every pixel of the batch.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::nn::Session;
use crate::tape::Var;

/// Smoothing constant added to numerator and denominator of every ratio.
pub const SMOOTH: f64 = 1e-6;

static DEGENERATE_DISTANCE_MAPS: AtomicUsize = AtomicUsize::new(0);

/// Number of all-foreground or all-background masks seen by
/// [`signed_distance`] since process start.
pub fn degenerate_distance_maps() -> usize {
    DEGENERATE_DISTANCE_MAPS.load(Ordering::Relaxed)
}

/// A scalar loss and its gradient with respect to the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_len(s: &[f64], other: &[f64], what: &str) -> Result<()> {
    if s.len() != other.len() {
        return Err(Error::Shape(format!("{what}: {} probabilities vs {} targets", s.len(), other.len())));
    }
    Ok(())
}

/// `1 - (2 sum(s g) + eps) / (sum(s) + sum(g) + eps)`.
pub fn dice_loss(s: &[f64], g: &[f64]) -> Result<LossValue> {
    check_len(s, g, "dice")?;
    let inter: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
    let denom = s.iter().sum::<f64>() + g.iter().sum::<f64>() + SMOOTH;
    let num = 2.0 * inter + SMOOTH;
    let grad = g.iter().map(|&gi| -(2.0 * gi * denom - num) / (denom * denom)).collect();
    Ok(LossValue { value: 1.0 - num / denom, grad })
}

/// Exact signed Euclidean distance to the nearest boundary pixel centre,
/// negative inside the mask. Boundary pixels are foreground pixels with a
/// 4-neighbour in the background. Returns `None` when the mask is all
/// foreground or all background.
pub fn signed_distance(g: &BinaryMask) -> Option<Vec<f64>> {
    let (h, w) = (g.height(), g.width());
    let boundary = g.boundary(false);
    if boundary.is_empty() {
        DEGENERATE_DISTANCE_MAPS.fetch_add(1, Ordering::Relaxed);
        return None;
    }
    let mut phi = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let best = boundary
                .iter()
                .map(|&(by, bx)| {
                    let dy = y as f64 - by as f64;
                    let dx = x as f64 - bx as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            phi[y * w + x] = if g.get(y, x) { -best } else { best };
        }
    }
    Some(phi)
}

/// Distance maps for a batch of masks laid end to end. Degenerate slices
/// contribute zeros, which makes their boundary term vanish.
pub fn signed_distance_batch(masks: &[BinaryMask]) -> Vec<f64> {
    masks
        .iter()
        .flat_map(|m| signed_distance(m).unwrap_or_else(|| vec![0.0; m.height() * m.width()]))
        .collect()
}

/// `mean(s * phi)`.
pub fn boundary_loss(s: &[f64], phi: &[f64]) -> Result<LossValue> {
    check_len(s, phi, "boundary")?;
    if s.is_empty() {
        return Err(Error::Shape("boundary: empty input".into()));
    }
    let n = s.len() as f64;
    let value = s.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>() / n;
    Ok(LossValue { value, grad: phi.iter().map(|p| p / n).collect() })
}

/// Weights of the region and boundary terms in the ablation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub boundary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 0.9, boundary: 0.1 }
    }
}

/// `dice_weight * dice + boundary_weight * boundary`.
pub fn ablation_loss(s: &[f64], g: &[f64], phi: &[f64], weights: LossWeights) -> Result<LossValue> {
    let d = dice_loss(s, g)?;
    let b = boundary_loss(s, phi)?;
    let grad = d.grad.iter().zip(&b.grad).map(|(x, y)| weights.dice * x + weights.boundary * y).collect();
    Ok(LossValue { value: weights.dice * d.value + weights.boundary * b.value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TverskyParams {
    /// Coefficient on false negatives.
    pub alpha: f64,
    /// Coefficient on false positives.
    pub beta: f64,
    pub gamma: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        TverskyParams { alpha: 0.01, beta: 0.95, gamma: 1.5 }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config(format!("Tversky parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `(1 - TI)^gamma` with `TI = (TP + eps) / (TP + alpha FN + beta FP + eps)`.
pub fn focal_tversky_loss(s: &[f64], g: &[f64], p: TverskyParams) -> Result<LossValue> {
    check_len(s, g, "focal tversky")?;
    p.validate()?;
    let tp: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
    let fn_: f64 = s.iter().zip(g).map(|(a, b)| (1.0 - a) * b).sum();
    let fp: f64 = s.iter().zip(g).map(|(a, b)| a * (1.0 - b)).sum();
    let num = tp + SMOOTH;
    let den = tp + p.alpha * fn_ + p.beta * fp + SMOOTH;
    let ti = num / den;
    let slack = (1.0 - ti).max(0.0);
    let outer = if slack > 0.0 { -p.gamma * slack.powf(p.gamma - 1.0) } else { 0.0 };
    let grad = g
        .iter()
        .map(|&gi| {
            let dden = gi * (1.0 - p.alpha - p.beta) + p.beta;
            outer * (gi * den - num * dden) / (den * den)
        })
        .collect();
    Ok(LossValue { value: slack.powf(p.gamma), grad })
}

/// Training objective selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Ablation(LossWeights),
    FocalTversky(TverskyParams),
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Ablation(LossWeights::default())
    }
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ablation(_) => "ablation",
            LossKind::FocalTversky(_) => "focal_tversky",
        }
    }

    pub fn needs_distance(&self) -> bool {
        matches!(self, LossKind::Ablation(_))
    }

    pub fn evaluate(&self, s: &[f64], g: &[f64], phi: &[f64]) -> Result<LossValue> {
        match *self {
            LossKind::Ablation(w) => ablation_loss(s, g, phi, w),
            LossKind::FocalTversky(p) => focal_tversky_loss(s, g, p),
        }
    }
}

/// Foreground probability (softmax channel 1) of two-class logits
/// `[B, 2, H, W]`, as a `[B, 1, H, W]` tape node.
pub fn foreground_probability(sess: &mut Session, logits: Var) -> Result<Var> {
    let shape = sess.tape.shape(logits);
    if shape.c() != 2 {
        return Err(Error::Shape(format!("losses need two-class logits, got {shape}")));
    }
    let p = sess.tape.softmax_channels(logits)?;
    sess.tape.slice_channels(p, 1, 1)
}

/// Attach `kind` to the tape on top of two-class logits. Returns the loss
/// node and its value.
pub fn loss_on_logits(sess: &mut Session, logits: Var, g: &[f64], phi: &[f64], kind: &LossKind) -> Result<(Var, f64)> {
    let s = foreground_probability(sess, logits)?;
    let lv = kind.evaluate(sess.tape.value(s).data(), g, phi)?;
    if !lv.value.is_finite() {
        return Err(Error::NonFinite { op: format!("{} loss", kind.name()) });
    }
    let node = sess.tape.local_scalar(s, lv.value, lv.grad)?;
    Ok((node, lv.value))
}
