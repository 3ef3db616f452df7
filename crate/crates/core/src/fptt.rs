//! Forward Propagation Through Time.
//!
//! Parameters are updated after every time step from the instantaneous risk
//!
//! ```text
//! L_t = loss(y_t, yhat_t) + (alpha/2) * || w - wbar - ltrace / (2 alpha) ||^2
//! ```
//!
//! followed by the two state recurrences
//!
//! ```text
//! ltrace <- ltrace - alpha * (w_t - wbar)
//! wbar   <- (wbar + w_{t+1}) / 2 - ltrace / (2 alpha)
//! ```
//!
//! where `w_t` is the weight before the inner optimizer step and `wbar` is the
//! running average carried in from the previous step. The recurrences are
//! applied literally: `ltrace` only accumulates the `-alpha (w - wbar)` drift.
//! Because the carried network state is a constant inside each step, the tape
//! holds a single step and its size does not grow with the sequence length.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::model::{NetworkState, SpikingUSegNet};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerOptimizer {
    Adam,
    /// Plain gradient descent, used to keep hand-worked examples tractable.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { factor: 0.5, patience: 5, min_lr: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub optimizer: InnerOptimizer,
    pub plateau: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lr: 1e-3,
            weight_decay: 1e-5,
            clip_norm: 0.3,
            batch_size: 8,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            optimizer: InnerOptimizer::Adam,
            plateau: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
            ("plateau.factor", self.plateau.factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay < 0.0 || self.plateau.min_lr < 0.0 {
            return Err(Error::Config("weight_decay and plateau.min_lr must be non-negative".into()));
        }
        if self.plateau.factor >= 1.0 {
            return Err(Error::Config("plateau.factor must be below 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Optimizer memory: running-average weights, gradient trace and the inner
/// optimizer's moments, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FpttState<T> {
    pub wbar: Vec<Vec<T>>,
    pub ltrace: Vec<Vec<T>>,
    pub alpha: T,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Inner optimizer steps taken so far (Adam bias correction).
    pub steps: u64,
    pub lr: f64,
}

impl<T: Scalar> FpttState<T> {
    /// `wbar_0 = w_0`, `ltrace_0 = 0`.
    pub fn new(params: &[Parameter<T>], alpha: f64, lr: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect::<Vec<_>>();
        Ok(Self {
            wbar: params.iter().map(|p| p.value.data().to_vec()).collect(),
            ltrace: zeros(),
            alpha: T::lit(alpha),
            m: zeros(),
            v: zeros(),
            steps: 0,
            lr,
        })
    }

    /// Re-anchor the running average on the current weights and clear the
    /// trace. Inner optimizer moments are kept.
    pub fn re_anchor(&mut self, params: &[Parameter<T>]) -> Result<()> {
        self.check(params)?;
        for ((wb, lt), p) in self.wbar.iter_mut().zip(&mut self.ltrace).zip(params) {
            wb.copy_from_slice(p.value.data());
            lt.iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(())
    }

    fn check(&self, params: &[Parameter<T>]) -> Result<()> {
        if params.len() != self.wbar.len() {
            return Err(Error::ShapeMismatch {
                op: "fptt",
                axis: "parameter count",
                expected: self.wbar.len(),
                actual: params.len(),
            });
        }
        for (p, wb) in params.iter().zip(&self.wbar) {
            if p.len() != wb.len() {
                return Err(Error::ShapeMismatch {
                    op: "fptt",
                    axis: "parameter numel",
                    expected: wb.len(),
                    actual: p.len(),
                });
            }
        }
        Ok(())
    }

    /// Regularizer target `wbar + ltrace / (2 alpha)` for parameter `i`.
    fn anchor(&self, i: usize) -> Vec<T> {
        let inv = (T::lit(2.0) * self.alpha).recip();
        self.wbar[i].iter().zip(&self.ltrace[i]).map(|(&w, &l)| w + l * inv).collect()
    }

    /// Untracked value of the dynamic regularizer.
    pub fn regularizer(&self, params: &[Parameter<T>]) -> Result<T> {
        self.check(params)?;
        let half_alpha = self.alpha * T::lit(0.5);
        let mut r = T::zero();
        for (i, p) in params.iter().enumerate() {
            let a = self.anchor(i);
            r = r + p.value.data().iter().zip(&a).map(|(&w, &c)| (w - c) * (w - c)).sum::<T>() * half_alpha;
        }
        Ok(r)
    }
}

/// Records the dynamic regularizer over bound parameters. Returns `(R, task + R)`.
///
/// The running average and trace enter as constants, so no gradient flows
/// into them.
pub fn regularized_loss<T: Scalar>(
    tape: &mut Tape<T>,
    task_loss: Var,
    params: &[Parameter<T>],
    bound: &[Var],
    state: &FpttState<T>,
) -> Result<(Var, Var)> {
    state.check(params)?;
    if bound.len() != params.len() {
        return Err(Error::invalid("bound parameter list does not match the optimizer state"));
    }
    let mut terms = Vec::with_capacity(bound.len());
    for (i, (&w, p)) in bound.iter().zip(params).enumerate() {
        let anchor = tape.constant(Tensor::new(p.shape().to_vec(), state.anchor(i))?)?;
        let diff = tape.sub(w, anchor)?;
        terms.push(tape.sum_squares(diff)?);
    }
    let mut acc = match terms.split_first() {
        Some((&first, rest)) => rest.iter().try_fold(first, |a, &b| tape.add(a, b))?,
        None => tape.constant(Tensor::scalar(T::zero()))?,
    };
    acc = tape.scale(acc, state.alpha * T::lit(0.5))?;
    let total = tape.add(task_loss, acc)?;
    Ok((acc, total))
}

/// Outcome of one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Global L2 norm of all parameter gradients.
pub fn global_grad_norm<T: Scalar>(params: &[Parameter<T>]) -> Result<T> {
    let mut s = T::zero();
    for p in params {
        let g = p.grad().ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        s = s + g.iter().map(|&v| v * v).sum::<T>();
    }
    Ok(s.sqrt())
}

/// Scale gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(params: &mut [Parameter<T>], max_norm: f64) -> Result<(T, bool)> {
    let norm = global_grad_norm(params)?;
    let max = T::lit(max_norm);
    if norm > max {
        let scale = max / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.value.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = *v * scale);
            }
        }
        Ok((norm, true))
    } else {
        Ok((norm, false))
    }
}

/// Clip, take one inner optimizer step, then advance the trace and running
/// average. Gradients are cleared afterwards.
pub fn fptt_step<T: Scalar>(params: &mut [Parameter<T>], state: &mut FpttState<T>, cfg: &TrainConfig) -> Result<UpdateStats> {
    state.check(params)?;
    let (norm, clipped) = clip_grad_norm(params, cfg.clip_norm)?;
    state.steps += 1;
    let lr = T::lit(state.lr);
    let wd = T::lit(cfg.weight_decay);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let eps = T::lit(cfg.adam_eps);
    let bc1 = T::one() - b1.powi(state.steps.min(i32::MAX as u64) as i32);
    let bc2 = T::one() - b2.powi(state.steps.min(i32::MAX as u64) as i32);
    let alpha = state.alpha;
    let inv_two_alpha = (T::lit(2.0) * alpha).recip();
    let half = T::lit(0.5);

    for (i, p) in params.iter_mut().enumerate() {
        let g = p.value.grad.take().ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        let w = p.value.data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let (wbar, ltrace) = (&mut state.wbar[i], &mut state.ltrace[i]);
        for j in 0..w.len() {
            let w_t = w[j];
            let step = match cfg.optimizer {
                InnerOptimizer::Sgd => g[j],
                InnerOptimizer::Adam => {
                    m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                    v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                    (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps)
                }
            };
            let w_next = w_t - lr * step - lr * wd * w_t;
            ltrace[j] = ltrace[j] - alpha * (w_t - wbar[j]);
            wbar[j] = half * (wbar[j] + w_next) - inv_two_alpha * ltrace[j];
            w[j] = w_next;
        }
    }
    Ok(UpdateStats { grad_norm: norm.to_f64_lossy(), clipped })
}

/// Metrics of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub task_loss: f64,
    pub reg: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Tape nodes recorded for this step.
    pub tape_nodes: usize,
}

/// Forward one batch slice, backpropagate the instantaneous risk and update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    model: &mut SpikingUSegNet<T>,
    net_state: &mut NetworkState<T>,
    fptt: &mut FpttState<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
    t: usize,
) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let out = model.forward_step(&mut tape, &bound, net_state, input, true, rng, None)?;
    let task = losses::total_loss_on_tape(&mut tape, out.probs, target)?;
    let (reg, total) = regularized_loss(&mut tape, task, model.params(), &bound, fptt)?;
    let record_vals = (
        tape.value(task).item()?.to_f64_lossy(),
        tape.value(reg).item()?.to_f64_lossy(),
        tape.value(total).item()?.to_f64_lossy(),
    );
    let tape_nodes = tape.len();
    let grads = tape.backward(total)?;
    model.store_grads(&bound, &grads);
    let lr = fptt.lr;
    let stats = fptt_step(model.params_mut(), fptt, cfg)?;
    Ok(StepRecord {
        t,
        task_loss: record_vals.0,
        reg: record_vals.1,
        total: record_vals.2,
        grad_norm: stats.grad_norm,
        lr,
        tape_nodes,
    })
}

/// Online training over one slice sequence. Each element of `inputs` is a
/// `[N, 4, H, W]` batch for one time step, `targets` the matching
/// `[N, 3, H, W]` labels. The network state is reset first.
pub fn train_sequence<T: Scalar>(
    model: &mut SpikingUSegNet<T>,
    fptt: &mut FpttState<T>,
    inputs: &[Tensor<T>],
    targets: &[Tensor<T>],
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<StepRecord>> {
    if inputs.is_empty() {
        return Err(Error::invalid("training sequence has no slices"));
    }
    if inputs.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "train_sequence",
            axis: "slice count",
            expected: inputs.len(),
            actual: targets.len(),
        });
    }
    let mut state = model.new_state();
    inputs
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(t, (x, y))| train_step(model, &mut state, fptt, x, y, cfg, rng, t))
        .collect()
}

/// Single-volume form of [`train_sequence`]: slices `[4, H, W]`, labels `[3, H, W]`.
pub fn train_volume<T: Scalar>(
    model: &mut SpikingUSegNet<T>,
    fptt: &mut FpttState<T>,
    slices: &[Tensor<T>],
    labels: &[Tensor<T>],
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<StepRecord>> {
    let lift = |v: &[Tensor<T>]| -> Result<Vec<Tensor<T>>> {
        v.iter()
            .map(|s| {
                let mut shape = vec![1];
                shape.extend_from_slice(s.shape());
                s.clone().reshape(shape)
            })
            .collect()
    };
    train_sequence(model, fptt, &lift(slices)?, &lift(labels)?, cfg, rng)
}

/// Reduce-on-plateau learning-rate schedule for a metric where lower is better.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    best: Option<f64>,
    bad_epochs: usize,
    lr: f64,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Self {
        Self { cfg, best: None, bad_epochs: 0, lr }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's metric and return the learning rate to use next.
    pub fn step(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(b) if !(metric < b) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.cfg.patience {
                    self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
