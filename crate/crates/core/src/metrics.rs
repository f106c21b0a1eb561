//! Class-balanced loss and boundary-detection scores (pixel-exact F, ODS, OIS).

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Lower clamp for log arguments (NaN still propagates).
pub const LOG_FLOOR: f64 = 1e-7;
/// Number of evaluation thresholds `k / 34`, `k = 1..=33`.
pub const THRESHOLD_COUNT: usize = 33;

pub fn thresholds() -> Vec<f64> {
    (1..=THRESHOLD_COUNT).map(|k| k as f64 / (THRESHOLD_COUNT + 1) as f64).collect()
}

fn check_binary(target: &[f64]) -> Result<()> {
    if target.iter().any(|&t| t != 0.0 && t != 1.0) {
        return contract("target must be binary (0/1)");
    }
    Ok(())
}

/// Per-batch class weights `(positive, negative) = (N_neg / N, N_pos / N)`.
pub fn class_weights(target: &[f64]) -> (f64, f64) {
    let n = target.len() as f64;
    let pos = target.iter().sum::<f64>();
    ((n - pos) / n, pos / n)
}

/// Balanced binary cross-entropy, averaged over pixels, as a plain value.
pub fn balanced_bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    check_binary(target.data())?;
    let (wp, wn) = class_weights(target.data());
    let n = pred.len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if t == 1.0 {
                -wp * p.clamp(LOG_FLOOR, 1.0).ln()
            } else {
                -wn * (1.0 - p).clamp(LOG_FLOOR, 1.0).ln()
            }
        })
        .sum();
    Ok(total / n)
}

/// Graph version of [`balanced_bce`]; `pred` holds probabilities.
pub fn balanced_bce_node(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let value = balanced_bce(g.value(pred), target)?;
    let target = target.clone();
    let (wp, wn) = class_weights(target.data());
    Ok(g.custom(
        "balanced_bce",
        &[pred],
        Tensor::scalar(value),
        Box::new(move |gy, ins, _| {
            let n = ins[0].len() as f64;
            let s = gy.data()[0] / n;
            let grad = Tensor::from_fn(ins[0].shape(), |i| {
                let (p, t) = (ins[0].data()[i], target.data()[i]);
                if t == 1.0 {
                    if p > LOG_FLOOR {
                        -s * wp / p
                    } else {
                        0.0
                    }
                } else if 1.0 - p > LOG_FLOOR {
                    s * wn / (1.0 - p)
                } else {
                    0.0
                }
            });
            vec![Some(grad)]
        }),
    ))
}

/// Confusion counts at one threshold (`pred >= threshold` is positive).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn of(pred: &[f64], target: &[f64], threshold: f64) -> Self {
        let mut c = Counts::default();
        for (&p, &t) in pred.iter().zip(target) {
            match (p >= threshold, t > 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        c
    }

    pub fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// Precision, 1 when nothing is predicted.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// Recall, 1 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// `2 tp / (2 tp + fp + fn)`; a prediction with no errors and nothing to
    /// find scores 1.
    pub fn f(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Pixel-exact F-score at `threshold`.
pub fn f_score(pred: &[f64], target: &[f64], threshold: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return contract("prediction and target differ in length");
    }
    check_binary(target)?;
    Ok(Counts::of(pred, target, threshold).f())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Precision/recall over all pixels of the set, per threshold.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Best single threshold for the whole set (of the mean per-image F).
    pub ods: f64,
    pub ods_threshold: f64,
    /// Mean over images of each image's best F.
    pub ois: f64,
    /// F from counts pooled over the set at threshold 0.5.
    pub pixel_f: f64,
    pub images: usize,
}

/// Scores a set of `(prediction, target)` images.
pub fn evaluate(pairs: &[(&[f64], &[f64])]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return contract("evaluation needs at least one image");
    }
    let ts = thresholds();
    let mut pooled = vec![Counts::default(); ts.len()];
    let mut mean_f = vec![0.0; ts.len()];
    let mut ois = 0.0;
    let mut half = Counts::default();
    for (pred, target) in pairs {
        if pred.len() != target.len() {
            return contract("prediction and target differ in length");
        }
        check_binary(target)?;
        let mut best = 0.0f64;
        for (i, &t) in ts.iter().enumerate() {
            let c = Counts::of(pred, target, t);
            pooled[i] = pooled[i].add(c);
            let f = c.f();
            mean_f[i] += f;
            best = best.max(f);
        }
        ois += best;
        half = half.add(Counts::of(pred, target, 0.5));
    }
    let n = pairs.len() as f64;
    mean_f.iter_mut().for_each(|f| *f /= n);
    let (best_i, ods) = mean_f
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &f)| if f > acc.1 { (i, f) } else { acc });
    Ok(EvalReport {
        precision: pooled.iter().map(Counts::precision).collect(),
        recall: pooled.iter().map(Counts::recall).collect(),
        ods,
        ods_threshold: ts[best_i],
        ois: ois / n,
        pixel_f: half.f(),
        images: pairs.len(),
        thresholds: ts,
    })
}

/// [`evaluate`] over `[N, 1, H, W]` prediction and target batches.
pub fn evaluate_batch(pred: &Tensor, target: &Tensor) -> Result<EvalReport> {
    pred.expect_same_shape(target)?;
    let (n, c, h, w) = pred.nchw()?;
    let size = c * h * w;
    let pairs: Vec<(&[f64], &[f64])> = (0..n)
        .map(|i| (&pred.data()[i * size..(i + 1) * size], &target.data()[i * size..(i + 1) * size]))
        .collect();
    evaluate(&pairs)
}
