//! Training losses (binary cross-entropy, Dice, epipolar-consistency) and
//! mask evaluation metrics.
//!
//! Losses operate on a probability node of any shape and a flat target of
//! the same length, so a batch `[N, 1, H, W]` is scored as one pooled set of
//! pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{BinaryMask, FloatMap};
use crate::tensor::{Element, Graph, Var};

/// Probability clipping for the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Denominator guard for the Dice loss.
pub const DICE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_b: f64,
    pub lambda_d: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_b: 0.8,
            lambda_d: 0.1,
            lambda_e: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_b", self.lambda_b), ("lambda_d", self.lambda_d), ("lambda_e", self.lambda_e)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy (natural log) against 0/1 targets.
pub fn bce_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: &[T]) -> Result<Var> {
    g.bce(pred, target, BCE_EPS)
}

/// `1 - 2 Σ y ŷ / (Σ y² + Σ ŷ² + ε)`.
pub fn dice_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: &[T]) -> Result<Var> {
    g.dice(pred, target, DICE_EPS)
}

/// Mean of `(1 - ŷ) E` over the pixels where the normalized epipolar error
/// `E` is nonzero. Penalizes predicting "real" where matches violate the
/// epipolar constraint; zero when `E` is empty.
pub fn egc_loss<T: Element>(g: &mut Graph<T>, pred: Var, error_map: &[T]) -> Result<Var> {
    g.egc(pred, error_map)
}

/// Loss nodes of one composite evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub bce: Var,
    pub dice: Var,
    /// Absent when no error map was supplied.
    pub egc: Option<Var>,
}

/// `λB·BCE + λD·Dice + λE·EGC`; the EGC term is dropped when `error_map` is
/// `None` (no stereo pair for this sample).
pub fn composite_loss<T: Element>(
    g: &mut Graph<T>,
    pred: Var,
    target: &[T],
    error_map: Option<&[T]>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let bce = bce_loss(g, pred, target)?;
    let dice = dice_loss(g, pred, target)?;
    let wb = g.scale(bce, T::from_f64(weights.lambda_b));
    let wd = g.scale(dice, T::from_f64(weights.lambda_d));
    let mut total = g.add(wb, wd)?;
    let egc = match error_map {
        Some(e) => {
            let l = egc_loss(g, pred, e)?;
            let we = g.scale(l, T::from_f64(weights.lambda_e));
            total = g.add(total, we)?;
            Some(l)
        }
        None => None,
    };
    Ok(LossTerms {
        total,
        bce,
        dice,
        egc,
    })
}

/// Mask labels as a float target.
pub fn mask_target<T: Element>(mask: &BinaryMask) -> Vec<T> {
    mask.data.iter().map(|&v| T::from_f64(v as f64)).collect()
}

/// Confusion counts with label 1 (virtual) as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn from_masks(pred: &BinaryMask, target: &BinaryMask) -> Result<Self> {
        if (pred.width, pred.height) != (target.width, target.height) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs target {}x{}",
                pred.width, pred.height, target.width, target.height
            )));
        }
        let mut c = Counts::default();
        for (&p, &t) in pred.data.iter().zip(&target.data) {
            match (p == 1, t == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Counts,
}

impl EvalReport {
    /// Metrics from counts. An empty prediction against an empty target
    /// scores IoU = F1 = 1; otherwise a zero denominator gives 0.
    pub fn from_counts(counts: Counts) -> Self {
        let Counts { tp, fp, fn_, .. } = counts;
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        if tp + fp + fn_ == 0 {
            return Self {
                iou: 1.0,
                f1: 1.0,
                precision: 0.0,
                recall: 0.0,
                counts,
            };
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            iou: ratio(tp, tp + fp + fn_),
            f1,
            precision,
            recall,
            counts,
        }
    }
}

/// Pixels with probability `>= threshold` are labeled virtual.
pub fn threshold_map(prob: &FloatMap, threshold: f32) -> BinaryMask {
    BinaryMask {
        width: prob.width,
        height: prob.height,
        data: prob.data.iter().map(|&p| (p >= threshold) as u8).collect(),
    }
}

/// Binarize `prob` at `threshold` and score it against `target`.
pub fn evaluate(prob: &FloatMap, target: &BinaryMask, threshold: f32) -> Result<EvalReport> {
    evaluate_mask(&threshold_map(prob, threshold), target)
}

pub fn evaluate_mask(pred: &BinaryMask, target: &BinaryMask) -> Result<EvalReport> {
    Ok(EvalReport::from_counts(Counts::from_masks(pred, target)?))
}

/// Per-image mean of IoU and F1 plus metrics over pooled counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub images: usize,
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub pooled: EvalReport,
}

pub fn aggregate(reports: &[EvalReport]) -> Aggregate {
    let n = reports.len();
    let mean = |f: fn(&EvalReport) -> f64| {
        if n == 0 {
            0.0
        } else {
            reports.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let pooled = reports.iter().fold(Counts::default(), |acc, r| acc.merge(r.counts));
    Aggregate {
        images: n,
        mean_iou: mean(|r| r.iou),
        mean_f1: mean(|r| r.f1),
        pooled: EvalReport::from_counts(pooled),
    }
}
