//! Training objectives.
//!
//! Distillation combines four terms (BCE and soft DICE between the student's
//! final masks and binarized teacher finals, plus spatial and channel-wise
//! KL between the intermediate mask stacks):
//!
//! ```text
//! L_DIS = L_BCE + λ·(L_DICE + L_KL + L_CD)
//! ```
//!
//! Fine-tuning uses `L_mask = L_BCE + λ_DICE·L_DICE`, evaluated on a sampled
//! point subset instead of the dense mask. Both KL terms consume raw logits
//! through a temperature-scaled softmax; the KL reference distribution is
//! the teacher, `KL(T ‖ S)`.

use crate::graph::{bilinear_points_value, softmax_last_value, Graph, Var};
use crate::{Error, Result};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;

/// Hyper-parameters for all objectives.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// λ weighting the DICE/KL/channel-KL block of the distillation loss.
    pub lambda_distill: f64,
    /// λ_DICE weighting DICE in the fine-tuning mask loss.
    pub lambda_dice: f64,
    /// Softmax temperature τ for both KL terms (τ² scaling applied).
    pub temperature: f64,
    /// Smoothing ε in soft DICE; 1 keeps empty-vs-empty masks at zero loss.
    pub dice_eps: f64,
    /// Points per image for point-sampled losses (capped at H·W).
    pub point_count: usize,
    /// Oversampling factor for the importance-sampling candidate pool.
    pub oversample_ratio: f64,
    /// Fraction of points taken from the most uncertain candidates.
    pub importance_fraction: f64,
    /// Use σ(teacher logits) instead of hard-binarized teacher finals.
    pub soft_teacher_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_distill: 5.0,
            lambda_dice: 5.0,
            temperature: 1.0,
            dice_eps: 1.0,
            point_count: 1024,
            oversample_ratio: 3.0,
            importance_fraction: 0.75,
            soft_teacher_targets: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("lambda_distill", self.lambda_distill),
            ("lambda_dice", self.lambda_dice),
            ("temperature", self.temperature),
            ("dice_eps", self.dice_eps),
            ("oversample_ratio", self.oversample_ratio),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(Error::Config(format!("loss.{name} must be positive, got {v}")));
            }
        }
        if self.point_count == 0 {
            return Err(Error::Config("loss.point_count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.importance_fraction) {
            return Err(Error::Config(format!(
                "loss.importance_fraction must be in [0,1], got {}",
                self.importance_fraction
            )));
        }
        Ok(())
    }
}

/// Mean BCE from logits against constant targets in `[0,1]`.
pub fn bce_loss(g: &mut Graph, logits: Var, targets: &ArrayD<f64>) -> Var {
    g.bce_with_logits_mean(logits, targets)
}

/// Soft DICE loss `1 − (2Σpy + ε)/(Σp + Σy + ε)`, one term per mask (the
/// leading two axes index batch and mask; everything after is summed), then
/// averaged over masks.
pub fn dice_loss(g: &mut Graph, logits: Var, targets: &ArrayD<f64>, eps: f64) -> Var {
    let shape = g.shape(logits).to_vec();
    assert!(shape.len() >= 3, "dice_loss expects [b, k, spatial...]");
    assert_eq!(shape.as_slice(), targets.shape(), "dice_loss: shape mismatch");
    let (b, k) = (shape[0], shape[1]);
    let n: usize = shape[2..].iter().product();
    let p = g.sigmoid(logits);
    let p = g.reshape(p, &[b, k, n, 1]);
    let t = targets
        .clone()
        .into_shape_with_order(IxDyn(&[b, k, n, 1]))
        .expect("dice targets reshape");
    let tv = g.constant(t.clone());
    let py = g.mul(p, tv);
    let sum_py = g.sum_last2(py); // [b, k]
    let sum_p = g.sum_last2(p); // [b, k]
    let sum_y = {
        let flat = t.into_shape_with_order(IxDyn(&[b * k, n])).unwrap();
        let sums = flat.sum_axis(Axis(1));
        sums.into_shape_with_order(IxDyn(&[b, k])).unwrap()
    };
    let num = g.scale(sum_py, 2.0);
    let num = g.add_scalar(num, eps);
    let sy = g.constant(sum_y);
    let den = g.add(sum_p, sy);
    let den = g.add_scalar(den, eps);
    let ratio = g.div(num, den);
    let mean_ratio = g.mean_all(ratio);
    let neg = g.neg(mean_ratio);
    g.add_scalar(neg, 1.0)
}

/// Numerically stable log-softmax over the last axis of a plain array.
fn log_softmax_value(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut y = x.clone();
    let last = y.ndim() - 1;
    for mut lane in y.lanes_mut(Axis(last)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lane.mapv_inplace(|v| v - lse);
    }
    y
}

/// Shared core of the two KL terms: student logits reshaped to
/// `[groups, dist]`, teacher likewise; softmax over `dist`, `KL(T ‖ S)`
/// averaged over groups and scaled by τ².
fn kl_rows(g: &mut Graph, s_rows: Var, t_rows: &ArrayD<f64>, tau: f64) -> Var {
    let shape = g.shape(s_rows).to_vec();
    assert_eq!(shape.as_slice(), t_rows.shape(), "kl: shape mismatch");
    let groups: usize = shape[..shape.len() - 1].iter().product();
    let t_scaled = t_rows / tau;
    let t_prob = softmax_last_value(&t_scaled);
    let t_log = log_softmax_value(&t_scaled);
    let const_term: f64 = (&t_prob * &t_log).sum();
    let s_scaled = g.scale(s_rows, 1.0 / tau);
    let s_log = g.log_softmax_last(s_scaled);
    let cross = g.dot_const(s_log, &t_prob);
    let neg_cross = g.neg(cross);
    let kl_sum = g.add_scalar(neg_cross, const_term);
    g.scale(kl_sum, tau * tau / groups as f64)
}

/// Spatial KL: per mask channel, softmax over the h·w positions; mean over
/// channels (and batch), scaled by τ².
pub fn kl_spatial(g: &mut Graph, s_mid: Var, t_mid: &ArrayD<f64>, tau: f64) -> Var {
    let shape = g.shape(s_mid).to_vec();
    assert_eq!(shape.len(), 4, "kl_spatial expects [b, k, h, w]");
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let s = g.reshape(s_mid, &[b, k, h * w]);
    let t = t_mid
        .clone()
        .into_shape_with_order(IxDyn(&[b, k, h * w]))
        .expect("kl_spatial teacher reshape");
    kl_rows(g, s, &t, tau)
}

/// Channel KL: per spatial position, softmax over the mask-channel axis;
/// mean over positions (and batch), scaled by τ².
pub fn kl_channel(g: &mut Graph, s_mid: Var, t_mid: &ArrayD<f64>, tau: f64) -> Var {
    let shape = g.shape(s_mid).to_vec();
    assert_eq!(shape.len(), 4, "kl_channel expects [b, k, h, w]");
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let s = g.permute(s_mid, &[0, 2, 3, 1]);
    let s = g.reshape(s, &[b, h * w, k]);
    let t = t_mid
        .view()
        .permuted_axes(IxDyn(&[0, 2, 3, 1]))
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(&[b, h * w, k]))
        .expect("kl_channel teacher reshape");
    kl_rows(g, s, &t, tau)
}

/// Per-term values of the distillation loss, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub kl_spatial: f64,
    pub kl_channel: f64,
    pub total: f64,
}

/// Binarize teacher logits at 0 into hard {0,1} targets.
pub fn binarize_logits(t: &ArrayD<f64>) -> ArrayD<f64> {
    t.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Composite distillation objective.
///
/// `s_mid`/`t_mid` are the index-aligned intermediate mask stacks
/// `[b, 6N, h, w]`; `s_final`/`t_final_logits` the final mask sets
/// `[b, N, h, w]`. BCE/DICE compare finals (teacher binarized unless
/// `soft_teacher_targets`); the KL pair compares intermediates.
pub fn distill_loss(
    g: &mut Graph,
    s_mid: Var,
    s_final: Var,
    t_mid: &ArrayD<f64>,
    t_final_logits: &ArrayD<f64>,
    cfg: &LossConfig,
) -> Result<(Var, DistillBreakdown)> {
    if g.shape(s_mid) != t_mid.shape() {
        return Err(Error::Shape(format!(
            "distill: student intermediate {:?} vs teacher {:?}",
            g.shape(s_mid),
            t_mid.shape()
        )));
    }
    if g.shape(s_final) != t_final_logits.shape() {
        return Err(Error::Shape(format!(
            "distill: student final {:?} vs teacher final {:?}",
            g.shape(s_final),
            t_final_logits.shape()
        )));
    }
    let targets = if cfg.soft_teacher_targets {
        t_final_logits.mapv(crate::graph::sigmoid_scalar)
    } else {
        binarize_logits(t_final_logits)
    };
    let bce = bce_loss(g, s_final, &targets);
    let dice = dice_loss(g, s_final, &targets, cfg.dice_eps);
    let kls = kl_spatial(g, s_mid, t_mid, cfg.temperature);
    let klc = kl_channel(g, s_mid, t_mid, cfg.temperature);
    let inner = g.add(dice, kls);
    let inner = g.add(inner, klc);
    let weighted = g.scale(inner, cfg.lambda_distill);
    let total = g.add(bce, weighted);
    let breakdown = DistillBreakdown {
        bce: g.scalar_value(bce),
        dice: g.scalar_value(dice),
        kl_spatial: g.scalar_value(kls),
        kl_channel: g.scalar_value(klc),
        total: g.scalar_value(total),
    };
    Ok((total, breakdown))
}

/// Importance-sample `point_count` coordinates per image in `[0,1]²`
/// (PointRend-style): draw `oversample_ratio·n` uniform candidates, keep the
/// `importance_fraction·n` with the smallest `|logit|` (most uncertain),
/// fill the remainder with fresh uniform draws. `pred_logits` is
/// `[b, k, h, w]`; uncertainty averages over `k`. Output `[b, n, 2]` as
/// `(x, y)` pairs.
pub fn sample_points<R: Rng>(
    rng: &mut R,
    pred_logits: &ArrayD<f64>,
    cfg: &LossConfig,
) -> ArrayD<f64> {
    let shape = pred_logits.shape();
    assert_eq!(shape.len(), 4, "sample_points expects [b, k, h, w]");
    let (b, k, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let n = cfg.point_count.min(h * w);
    let n_imp = ((cfg.importance_fraction * n as f64).floor() as usize).min(n);
    let n_over = ((n as f64 * cfg.oversample_ratio).ceil() as usize).max(n_imp.max(1));
    let mut out = ArrayD::zeros(IxDyn(&[b, n, 2]));
    for bi in 0..b {
        // Candidate pool.
        let mut cand = ArrayD::zeros(IxDyn(&[1, n_over, 2]));
        for pi in 0..n_over {
            cand[IxDyn(&[0, pi, 0])] = rng.gen::<f64>();
            cand[IxDyn(&[0, pi, 1])] = rng.gen::<f64>();
        }
        let img = pred_logits
            .slice_axis(Axis(0), ndarray::Slice::from(bi..bi + 1))
            .to_owned();
        let vals = bilinear_points_value(&img, &cand); // [1, k, n_over]
        let mut scored: Vec<(f64, usize)> = (0..n_over)
            .map(|pi| {
                let mut acc = 0.0;
                for ci in 0..k {
                    acc += vals[IxDyn(&[0, ci, pi])].abs();
                }
                (acc / k as f64, pi)
            })
            .collect();
        // Most uncertain first; index tiebreak keeps this deterministic.
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for (slot, &(_, pi)) in scored.iter().take(n_imp).enumerate() {
            out[IxDyn(&[bi, slot, 0])] = cand[IxDyn(&[0, pi, 0])];
            out[IxDyn(&[bi, slot, 1])] = cand[IxDyn(&[0, pi, 1])];
        }
        for slot in n_imp..n {
            out[IxDyn(&[bi, slot, 0])] = rng.gen::<f64>();
            out[IxDyn(&[bi, slot, 1])] = rng.gen::<f64>();
        }
    }
    out
}

/// The full pixel-centre grid as a point set `[b, h·w, 2]`; reading any map
/// at these coordinates reproduces it exactly, so point losses on the grid
/// equal their dense counterparts.
pub fn grid_points(b: usize, h: usize, w: usize) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[b, h * w, 2]));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                out[IxDyn(&[bi, i * w + j, 0])] = (j as f64 + 0.5) / w as f64;
                out[IxDyn(&[bi, i * w + j, 1])] = (i as f64 + 0.5) / h as f64;
            }
        }
    }
    out
}

/// Per-term values of the mask loss, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskLossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

/// Point-sampled mask loss `L_BCE + λ_DICE·L_DICE`. Logits `[b, k, h, w]`
/// and targets `[b, k, H, W]` may differ in resolution: both are read at the
/// same normalized coordinates `[b, p, 2]`.
pub fn point_mask_loss(
    g: &mut Graph,
    logits: Var,
    targets: &ArrayD<f64>,
    coords: &ArrayD<f64>,
    cfg: &LossConfig,
) -> Result<(Var, MaskLossBreakdown)> {
    let ls = g.shape(logits).to_vec();
    let ts = targets.shape();
    if ls.len() != 4 || ts.len() != 4 || ls[0] != ts[0] || ls[1] != ts[1] {
        return Err(Error::Shape(format!(
            "point_mask_loss: logits {ls:?} vs targets {ts:?}"
        )));
    }
    let cv = g.constant(coords.clone());
    let s_pts = g.bilinear_points(logits, cv); // [b, k, p]
    let t_pts = bilinear_points_value(targets, coords);
    let bce = bce_loss(g, s_pts, &t_pts);
    let dice = dice_loss(g, s_pts, &t_pts, cfg.dice_eps);
    let weighted = g.scale(dice, cfg.lambda_dice);
    let total = g.add(bce, weighted);
    let breakdown = MaskLossBreakdown {
        bce: g.scalar_value(bce),
        dice: g.scalar_value(dice),
        total: g.scalar_value(total),
    };
    Ok((total, breakdown))
}
