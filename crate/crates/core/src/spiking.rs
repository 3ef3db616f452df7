//! Leaky integrate-and-fire dynamics with a learnable per-layer leak.
//!
//! Membrane update with soft reset by the previous spike:
//!
//! ```text
//! u_t = lam * u_{t-1} + I_t - theta * s_{t-1}
//! s_t = H(u_t - theta)
//! ```
//!
//! The leak of a parametric layer is `lam = sigmoid(a)`; the membrane time
//! constant is recoverable as `tau = -1 / ln(lam)`. The step function is
//! differentiated with the arctan surrogate `1 / (1 + (pi x)^2)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid_scalar, surrogate_grad, Tape, Tensor, Var};

pub const DEFAULT_THETA: f64 = 1.0;
/// Initial leak logit, `sigmoid(1) ≈ 0.731`.
pub const DEFAULT_LEAK_LOGIT: f64 = 1.0;

/// Temporal state of one spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<T> {
    pub u: Tensor<T>,
    pub s_prev: Tensor<T>,
    pub theta: T,
}

impl<T: Scalar> LifState<T> {
    pub fn zeros(shape: &[usize], theta: T) -> Self {
        Self {
            u: Tensor::zeros(shape.to_vec()),
            s_prev: Tensor::zeros(shape.to_vec()),
            theta,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.u.shape()
    }

    pub fn reset(&mut self) {
        self.u.data_mut().iter_mut().for_each(|v| *v = T::zero());
        self.s_prev.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }

    /// Fraction of neurons that fired on the last step.
    pub fn firing_rate(&self) -> f64 {
        if self.s_prev.is_empty() {
            0.0
        } else {
            self.s_prev.count_nonzero() as f64 / self.s_prev.len() as f64
        }
    }
}

/// Zero every membrane and spike buffer.
pub fn reset_states<T: Scalar>(states: &mut [LifState<T>]) {
    states.iter_mut().for_each(LifState::reset);
}

/// Learnable leak of a parametric LIF layer, shared by all its neurons.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlifParams<T> {
    pub a: T,
    pub theta: T,
}

impl<T: Scalar> PlifParams<T> {
    pub fn new(a: T, theta: T) -> Self {
        Self { a, theta }
    }

    pub fn leak(&self) -> T {
        sigmoid_scalar(self.a)
    }

    /// Equivalent membrane time constant in steps.
    pub fn tau(&self) -> T {
        -self.leak().ln().recip()
    }
}

impl<T: Scalar> Default for PlifParams<T> {
    fn default() -> Self {
        Self::new(T::lit(DEFAULT_LEAK_LOGIT), T::lit(DEFAULT_THETA))
    }
}

/// Heaviside spikes of `v = u - theta` together with the surrogate derivative.
pub fn surrogate_spike<T: Scalar>(v: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let spikes = v.map(|x| if x >= T::zero() { T::one() } else { T::zero() });
    (spikes, v.map(surrogate_grad))
}

/// One untracked LIF step; returns the emitted spikes and the next state.
pub fn lif_step<T: Scalar>(state: &LifState<T>, input: &Tensor<T>, lam: T) -> Result<(Tensor<T>, LifState<T>)> {
    if input.shape() != state.shape() {
        return Err(Error::ShapeMismatch {
            op: "lif_step",
            axis: "neurons",
            expected: state.u.len(),
            actual: input.len(),
        });
    }
    let theta = state.theta;
    let u: Vec<T> = state
        .u
        .data()
        .iter()
        .zip(input.data())
        .zip(state.s_prev.data())
        .map(|((&u, &i), &s)| lam * u + i - theta * s)
        .collect();
    let u = Tensor::new(state.shape().to_vec(), u)?;
    let (spikes, _) = surrogate_spike(&u.map(|x| x - theta));
    let next = LifState { u, s_prev: spikes.clone(), theta };
    Ok((spikes, next))
}

/// Untracked parametric step: [`lif_step`] with `lam = sigmoid(a)`.
pub fn plif_forward<T: Scalar>(
    params: &PlifParams<T>,
    state: &LifState<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, LifState<T>)> {
    let mut st = state.clone();
    st.theta = params.theta;
    lif_step(&st, input, params.leak())
}

/// Output of a tracked PLIF step.
pub struct PlifOutput {
    pub spikes: Var,
    pub membrane: Var,
}

/// Tracked parametric step. `leak_logit` is a single-element node; the
/// carried membrane and previous spikes enter the graph as constants.
pub fn plif_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    leak_logit: Var,
    state: &LifState<T>,
    input: Var,
) -> Result<PlifOutput> {
    if tape.shape(input) != state.shape() {
        return Err(Error::ShapeMismatch {
            op: "plif_forward",
            axis: "neurons",
            expected: state.u.len(),
            actual: tape.value(input).len(),
        });
    }
    let lam = tape.sigmoid(leak_logit)?;
    let u_prev = tape.constant(state.u.clone())?;
    let leaked = tape.scale_by(lam, u_prev)?;
    let integrated = tape.add(leaked, input)?;
    let reset = tape.constant(state.s_prev.map(|s| s * state.theta))?;
    let membrane = tape.sub(integrated, reset)?;
    let v = tape.add_scalar(membrane, -state.theta)?;
    let spikes = tape.spike(v)?;
    Ok(PlifOutput { spikes, membrane })
}

/// Advance `state` from the values recorded by [`plif_on_tape`].
pub fn commit_plif<T: Scalar>(tape: &Tape<T>, out: &PlifOutput, state: &mut LifState<T>) {
    let mut u = tape.value(out.membrane).clone();
    u.requires_grad = false;
    let mut s = tape.value(out.spikes).clone();
    s.requires_grad = false;
    state.u = u;
    state.s_prev = s;
}
