//! Evaluation metrics on full volumes and the JSON metrics report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopsReport;
use crate::losses::bce_term;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hard-threshold used to binarize probabilities for the Dice ratio.
pub const DICE_THRESHOLD: f64 = 0.5;

/// Per-class hard Dice ratio in (ET, TC, WT) order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassDice {
    pub et: f64,
    pub tc: f64,
    pub wt: f64,
}

impl ClassDice {
    pub fn mean(&self) -> f64 {
        (self.et + self.tc + self.wt) / 3.0
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.et, self.tc, self.wt]
    }

    pub fn average(items: &[ClassDice]) -> ClassDice {
        if items.is_empty() {
            return ClassDice::default();
        }
        let n = items.len() as f64;
        ClassDice {
            et: items.iter().map(|d| d.et).sum::<f64>() / n,
            tc: items.iter().map(|d| d.tc).sum::<f64>() / n,
            wt: items.iter().map(|d| d.wt).sum::<f64>() / n,
        }
    }
}

/// Hard Dice `2|P ∩ G| / (|P| + |G|)` of one binary mask pair; both empty
/// counts as perfect agreement.
pub fn dice_ratio(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Per-class Dice of `[3, X, Y, Z]` probabilities (thresholded at 0.5) against
/// binary labels of the same shape.
pub fn dice_ratio_3d<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<ClassDice> {
    check_volume_pair("dice_ratio_3d", probs, labels)?;
    let per = probs.len() / 3;
    let thr = T::lit(DICE_THRESHOLD);
    let half = T::lit(0.5);
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let p: Vec<bool> = probs.data()[c * per..(c + 1) * per].iter().map(|&v| v >= thr).collect();
        let g: Vec<bool> = labels.data()[c * per..(c + 1) * per].iter().map(|&v| v >= half).collect();
        *slot = dice_ratio(&p, &g);
    }
    Ok(ClassDice { et: out[0], tc: out[1], wt: out[2] })
}

/// Mean voxel-and-channel negative log-likelihood with clamped probabilities.
pub fn nll<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<f64> {
    if probs.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "nll",
            axis: "numel",
            expected: probs.len(),
            actual: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(Error::invalid("nll on empty volume"));
    }
    // accumulate in f64 so large volumes do not drift
    let s: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| bce_term(p.to_f64_lossy(), y.to_f64_lossy()))
        .sum();
    Ok(s / probs.len() as f64)
}

fn check_volume_pair<T: Scalar>(op: &'static str, probs: &Tensor<T>, labels: &Tensor<T>) -> Result<()> {
    if probs.shape().first() != Some(&3) {
        return Err(Error::ShapeMismatch {
            op,
            axis: "class channels",
            expected: 3,
            actual: probs.shape().first().copied().unwrap_or(0),
        });
    }
    if probs.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            op,
            axis: "volume extent",
            expected: probs.len(),
            actual: labels.len(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub dense: f64,
    pub spiking: f64,
    pub reduction_pct: f64,
}

impl From<&FlopsReport> for FlopsSummary {
    fn from(r: &FlopsReport) -> Self {
        FlopsSummary {
            dense: r.dense_total,
            spiking: r.spiking_total,
            reduction_pct: r.reduction_pct(),
        }
    }
}

/// Canonical metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: ClassDice,
    pub nll: f64,
    pub flops: FlopsSummary,
    pub sparsity_per_layer: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
