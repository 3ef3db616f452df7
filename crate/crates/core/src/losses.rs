//! Training objectives: binary cross-entropy, soft Dice and their equal blend.
//!
//! Predictions and targets are laid out as `[N, C, H, W]`, `[C, H, W]` or a
//! flat single-channel array. Dice is computed per channel and averaged.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Probability clamp shared by BCE and NLL.
pub const PROB_CLAMP: f64 = 1e-7;
/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

fn check_same<T: Scalar>(op: &'static str, pred: &Tensor<T>, target_len: usize) -> Result<()> {
    if pred.len() != target_len {
        return Err(Error::ShapeMismatch {
            op,
            axis: "numel",
            expected: pred.len(),
            actual: target_len,
        });
    }
    Ok(())
}

#[inline]
fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::lit(PROB_CLAMP);
    p.max(lo).min(T::one() - lo)
}

#[inline]
pub(crate) fn bce_term<T: Scalar>(p: T, y: T) -> T {
    let p = clamp_prob(p);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

pub(crate) fn bce_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(shape_err("bce_loss", pred, target));
    }
    if pred.is_empty() {
        return Err(Error::invalid("bce_loss on empty tensors"));
    }
    let n = T::from_usize(pred.len()).unwrap();
    let s: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| bce_term(p, y))
        .sum();
    Ok(s / n)
}

pub(crate) fn bce_grad<T: Scalar>(pred: &Tensor<T>, target: &[T]) -> Vec<T> {
    let n = T::from_usize(pred.len()).unwrap();
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    pred.data()
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                T::zero()
            } else {
                (-y / p + (T::one() - y) / (T::one() - p)) / n
            }
        })
        .collect()
}

/// (channels, elements per channel block) for the Dice channel axis.
fn channel_layout(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [_, c, h, w] => (c, h * w),
        [c, h, w] => (c, h * w),
        _ => (1, shape.iter().product::<usize>().max(1)),
    }
}

struct DiceSums<T> {
    inter: Vec<T>,
    denom: Vec<T>,
}

fn dice_sums<T: Scalar>(shape: &[usize], pred: &[T], target: &[T]) -> (DiceSums<T>, usize, usize) {
    let (c, inner) = channel_layout(shape);
    let mut inter = vec![T::zero(); c];
    let mut denom = vec![T::zero(); c];
    for (i, (&s, &r)) in pred.iter().zip(target).enumerate() {
        let ch = (i / inner) % c;
        inter[ch] = inter[ch] + s * r;
        denom[ch] = denom[ch] + s + r;
    }
    (DiceSums { inter, denom }, c, inner)
}

pub(crate) fn dice_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(shape_err("dice_loss", pred, target));
    }
    let (sums, c, _) = dice_sums(pred.shape(), pred.data(), target.data());
    let two = T::lit(2.0);
    let mean_dice = sums
        .inter
        .iter()
        .zip(&sums.denom)
        .map(|(&i, &d)| (two * i + eps) / (d + eps))
        .sum::<T>()
        / T::from_usize(c).unwrap();
    Ok(T::one() - mean_dice)
}

pub(crate) fn dice_grad<T: Scalar>(pred: &Tensor<T>, target: &[T], eps: T) -> Vec<T> {
    let (sums, c, inner) = dice_sums(pred.shape(), pred.data(), target);
    let two = T::lit(2.0);
    let cf = T::from_usize(c).unwrap();
    target
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let ch = (i / inner) % c;
            let den = sums.denom[ch] + eps;
            let num = two * sums.inter[ch] + eps;
            -(two * r * den - num) / (den * den * cf)
        })
        .collect()
}

fn shape_err<T: Scalar>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Error {
    if pred.len() != target.len() {
        return Error::ShapeMismatch { op, axis: "numel", expected: pred.len(), actual: target.len() };
    }
    Error::Rank { op, expected: pred.rank(), actual: target.shape().to_vec() }
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    bce_value(pred, target)
}

/// `1 - (2 sum(s r) + eps) / (sum(s) + sum(r) + eps)`, averaged over channels.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<T> {
    dice_value(pred, target, eps)
}

/// `0.5 * bce + 0.5 * dice`.
pub fn total_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let half = T::lit(0.5);
    Ok(half * bce_loss(pred, target)? + half * dice_loss(pred, target, T::lit(DICE_EPS))?)
}

/// Record the hybrid loss on a tape; returns the scalar loss node.
pub fn total_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    check_same("total_loss", tape.value(pred), target.len())?;
    let bce = tape.bce_loss(pred, target)?;
    let dice = tape.dice_loss(pred, target, T::lit(DICE_EPS))?;
    let sum = tape.add(bce, dice)?;
    tape.scale(sum, T::lit(0.5))
}
