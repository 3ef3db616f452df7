//! Spiking U-Seg-Net: a U-Net style encoder-decoder of spiking blocks.
//!
//! Every block is a single `conv3x3 -> GroupNorm -> dropout -> PLIF` chain.
//! Encoder levels are separated by 2x2 max pooling. Each decoder level
//! upsamples the previous spikes, concatenates the matching encoder spikes and
//! runs one block. A 3x3 readout convolution drives a leaky, non-spiking
//! integrator whose sigmoid gives per-slice (ET, TC, WT) probabilities.
//!
//! A forward step processes one slice (one time step) and advances the
//! carried temporal state. The carried state enters each step's graph as a
//! constant, so gradients never reach back across slices.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{ConvLayerInfo, FlopsRecorder};
use crate::scalar::Scalar;
use crate::spiking::{self, LifState};
use crate::tensor::{Parameter, Tape, Tensor, Var};

pub const INPUT_CHANNELS: usize = 4;
pub const OUTPUT_CHANNELS: usize = 3;
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of encoder levels (pooling stages + 1).
    pub depth: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub groups: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub theta: f64,
    /// Initial leak logit of every PLIF layer.
    pub leak_logit: f64,
    /// Initial leak logit of the readout integrator.
    pub readout_leak_logit: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            growth: 2,
            groups: 4,
            kernel: 3,
            dropout: 0.1,
            theta: spiking::DEFAULT_THETA,
            leak_logit: spiking::DEFAULT_LEAK_LOGIT,
            readout_leak_logit: spiking::DEFAULT_LEAK_LOGIT,
            in_channels: INPUT_CHANNELS,
            out_channels: OUTPUT_CHANNELS,
            height: 32,
            width: 32,
        }
    }
}

impl ModelConfig {
    pub fn with_slice(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn level_channels(&self) -> Vec<usize> {
        let mut c = self.base_channels;
        (0..self.depth)
            .map(|_| {
                let cur = c;
                c *= self.growth;
                cur
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels != INPUT_CHANNELS {
            return bad(format!("in_channels must be {INPUT_CHANNELS}, got {}", self.in_channels));
        }
        if self.out_channels != OUTPUT_CHANNELS {
            return bad(format!("out_channels must be {OUTPUT_CHANNELS}, got {}", self.out_channels));
        }
        if self.depth == 0 || self.depth > 16 {
            return bad(format!("depth must be in 1..=16, got {}", self.depth));
        }
        if self.base_channels == 0 || self.growth == 0 {
            return bad("base_channels and growth must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return bad(format!("theta must be positive, got {}", self.theta));
        }
        if self.height == 0 || self.width == 0 {
            return bad("slice height and width must be positive".into());
        }
        let div = 1usize << (self.depth - 1);
        for (axis, extent) in [("height", self.height), ("width", self.width)] {
            if extent % div != 0 {
                return bad(format!(
                    "slice {axis} {extent} is not divisible by 2^(depth-1) = {div}"
                ));
            }
        }
        for c in self.level_channels() {
            if self.groups == 0 || c % self.groups != 0 {
                return bad(format!("{c} channels not divisible into {} groups", self.groups));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    name: String,
    c_in: usize,
    c_out: usize,
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    leak: usize,
}

#[derive(Clone, Debug)]
struct Readout {
    weight: usize,
    bias: usize,
    leak: usize,
}

/// Carried state of the readout integrator.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutState<T> {
    pub v: Tensor<T>,
}

/// All temporal state of one network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState<T> {
    pub blocks: Vec<Option<LifState<T>>>,
    pub readout: Option<ReadoutState<T>>,
}

impl<T: Scalar> NetworkState<T> {
    /// Empty state; buffers are created as zeros on the first step.
    pub fn new(layers: usize) -> Self {
        Self { blocks: vec![None; layers], readout: None }
    }

    pub fn reset(&mut self) {
        self.blocks.iter_mut().for_each(|b| *b = None);
        self.readout = None;
    }

    pub fn is_reset(&self) -> bool {
        self.blocks.iter().all(Option::is_none) && self.readout.is_none()
    }
}

/// Result of one tracked forward step.
pub struct StepOutput {
    /// `[N, 3, H, W]` probabilities.
    pub probs: Var,
    /// Membrane potential of the readout integrator.
    pub readout_membrane: Var,
}

#[derive(Clone, Debug)]
pub struct SpikingUSegNet<T> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    blocks: Vec<Block>,
    readout: Readout,
}

impl<T: Scalar> SpikingUSegNet<T> {
    /// Build with Kaiming-uniform (fan-in) conv weights, zero biases, unit
    /// GroupNorm scale and the configured leak logits.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with_rng(config, &mut rng)
    }

    pub fn build_with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let chans = config.level_channels();
        let k = config.kernel;
        let mut params = Vec::new();
        let mut blocks = Vec::new();

        let add_block = |params: &mut Vec<Parameter<T>>, name: String, c_in: usize, c_out: usize, rng: &mut R| {
            let weight = push_conv_weight(params, &format!("{name}.conv.weight"), c_out, c_in, k, rng);
            let bias = push(params, &format!("{name}.conv.bias"), Tensor::zeros(vec![c_out]));
            let gamma = push(params, &format!("{name}.norm.weight"), Tensor::full(vec![c_out], T::one()));
            let beta = push(params, &format!("{name}.norm.bias"), Tensor::zeros(vec![c_out]));
            let leak = push(params, &format!("{name}.plif.leak"), Tensor::scalar(T::lit(config.leak_logit)));
            Block { name, c_in, c_out, weight, bias, gamma, beta, leak }
        };

        for (i, &c) in chans.iter().enumerate() {
            let c_in = if i == 0 { config.in_channels } else { chans[i - 1] };
            blocks.push(add_block(&mut params, format!("enc{}", i + 1), c_in, c, rng));
        }
        for i in (0..config.depth.saturating_sub(1)).rev() {
            let c_in = chans[i + 1] + chans[i];
            blocks.push(add_block(&mut params, format!("dec{}", i + 1), c_in, chans[i], rng));
        }
        let weight = push_conv_weight(&mut params, "readout.conv.weight", config.out_channels, chans[0], k, rng);
        let bias = push(&mut params, "readout.conv.bias", Tensor::zeros(vec![config.out_channels]));
        let leak = push(&mut params, "readout.leak", Tensor::scalar(T::lit(config.readout_leak_logit)));

        Ok(Self { config, params, blocks, readout: Readout { weight, bias, leak } })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    /// Number of spiking blocks (and LIF state slots).
    pub fn spiking_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn new_state(&self) -> NetworkState<T> {
        NetworkState::new(self.blocks.len())
    }

    /// Geometry of every conv layer in execution order.
    pub fn conv_layers(&self) -> Vec<ConvLayerInfo> {
        let mut v: Vec<ConvLayerInfo> = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| ConvLayerInfo {
                name: b.name.clone(),
                kernel: self.config.kernel,
                c_in: b.c_in,
                c_out: b.c_out,
                analog_input: i == 0,
            })
            .collect();
        v.push(ConvLayerInfo {
            name: "readout".into(),
            kernel: self.config.kernel,
            c_in: self.config.base_channels,
            c_out: self.config.out_channels,
            analog_input: false,
        });
        v
    }

    pub fn new_recorder(&self) -> FlopsRecorder {
        FlopsRecorder::new(self.conv_layers())
    }

    /// Put every parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.leaf(p.value.clone().with_requires_grad(true))).collect()
    }

    /// Put every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Copy the gradients of bound parameters into `Parameter::value.grad`.
    pub fn store_grads(&mut self, bound: &[Var], grads: &crate::tensor::Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            p.value.grad = grads.wrt(v).map(|g| g.data().to_vec());
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expect = [self.config.in_channels, self.config.height, self.config.width];
        let (rank_ok, tail) = match shape {
            [_, c, h, w] => (true, [*c, *h, *w]),
            _ => (false, [0, 0, 0]),
        };
        if !rank_ok {
            return Err(Error::Rank { op: "forward_step", expected: 4, actual: shape.to_vec() });
        }
        for ((axis, e), g) in ["C", "H", "W"].into_iter().zip(expect).zip(tail) {
            if e != g {
                return Err(Error::ShapeMismatch { op: "forward_step", axis, expected: e, actual: g });
            }
        }
        if shape[0] == 0 {
            return Err(Error::invalid("forward_step on an empty batch"));
        }
        Ok(())
    }

    fn conv(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        layer: usize,
        x: Var,
        w: usize,
        b: usize,
        recorder: &mut Option<&mut FlopsRecorder>,
    ) -> Result<Var> {
        if let Some(rec) = recorder.as_deref_mut() {
            let xv = tape.value(x);
            let s = xv.shape();
            rec.record(layer, s[0], s[2], s[3], xv.count_nonzero(), xv.len());
        }
        tape.conv2d_same(x, bound[w], bound[b])
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        idx: usize,
        x: Var,
        state: &mut NetworkState<T>,
        training: bool,
        rng: &mut dyn rand::RngCore,
        recorder: &mut Option<&mut FlopsRecorder>,
    ) -> Result<Var> {
        let b = &self.blocks[idx];
        let y = self.conv(tape, bound, idx, x, b.weight, b.bias, recorder)?;
        let y = tape.group_norm(y, self.config.groups, bound[b.gamma], bound[b.beta], T::lit(GROUP_NORM_EPS))?;
        let y = tape.dropout(y, self.config.dropout, training, rng)?;
        let shape = tape.shape(y).to_vec();
        let slot = &mut state.blocks[idx];
        let lif = match slot {
            Some(s) if s.shape() == shape.as_slice() => s,
            _ => slot.insert(LifState::zeros(&shape, T::lit(self.config.theta))),
        };
        let out = spiking::plif_on_tape(tape, bound[b.leak], lif, y)?;
        spiking::commit_plif(tape, &out, lif);
        Ok(out.spikes)
    }

    /// One tracked time step over a batch of slices `[N, 4, H, W]`.
    ///
    /// `state` is advanced in place. The returned graph only depends on the
    /// carried state through constants.
    pub fn forward_step(
        &self,
        tape: &mut Tape<T>,
        bound: &[Var],
        state: &mut NetworkState<T>,
        input: &Tensor<T>,
        training: bool,
        rng: &mut dyn rand::RngCore,
        mut recorder: Option<&mut FlopsRecorder>,
    ) -> Result<StepOutput> {
        self.check_input(input.shape())?;
        if bound.len() != self.params.len() {
            return Err(Error::invalid("bound parameter list does not match the model"));
        }
        if state.blocks.len() != self.blocks.len() {
            return Err(Error::invalid("network state does not match the model"));
        }
        let depth = self.config.depth;
        let x = tape.constant(input.clone())?;

        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for level in 0..depth {
            if level > 0 {
                h = tape.max_pool2(h)?;
            }
            h = self.block(tape, bound, level, h, state, training, rng, &mut recorder)?;
            skips.push(h);
        }
        for (j, level) in (0..depth - 1).rev().enumerate() {
            let up = tape.upsample_nn2(h)?;
            let cat = tape.concat_channels(up, skips[level])?;
            h = self.block(tape, bound, depth + j, cat, state, training, rng, &mut recorder)?;
        }

        let r = &self.readout;
        let current = self.conv(tape, bound, self.blocks.len(), h, r.weight, r.bias, &mut recorder)?;
        let shape = tape.shape(current).to_vec();
        let prev = match &state.readout {
            Some(rs) if rs.v.shape() == shape.as_slice() => rs.v.clone(),
            _ => Tensor::zeros(shape),
        };
        let lam = tape.sigmoid(bound[r.leak])?;
        let prev = tape.constant(prev)?;
        let leaked = tape.scale_by(lam, prev)?;
        let membrane = tape.add(leaked, current)?;
        let probs = tape.sigmoid(membrane)?;
        let mut v = tape.value(membrane).clone();
        v.requires_grad = false;
        state.readout = Some(ReadoutState { v });
        Ok(StepOutput { probs, readout_membrane: membrane })
    }

    /// Untracked step on a single slice `[4, H, W]`; returns `[3, H, W]`.
    pub fn forward_slice(
        &self,
        state: &mut NetworkState<T>,
        slice: &Tensor<T>,
        training: bool,
        rng: &mut dyn rand::RngCore,
        recorder: Option<&mut FlopsRecorder>,
    ) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(slice.shape());
        if slice.rank() != 3 {
            return Err(Error::Rank { op: "forward_slice", expected: 3, actual: slice.shape().to_vec() });
        }
        let input = slice.clone().reshape(shape)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape)?;
        let out = self.forward_step(&mut tape, &bound, state, &input, training, rng, recorder)?;
        let p = tape.value(out.probs);
        let tail = p.shape()[1..].to_vec();
        p.clone().with_requires_grad(false).reshape(tail)
    }

    /// Run a whole view sequence from a reset state; returns `[S, 3, H, W]`.
    pub fn forward_volume(
        &self,
        slices: &[Tensor<T>],
        mut recorder: Option<&mut FlopsRecorder>,
    ) -> Result<Tensor<T>> {
        if slices.is_empty() {
            return Err(Error::invalid("forward_volume on an empty slice sequence"));
        }
        let mut state = self.new_state();
        // inference never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outs = slices
            .iter()
            .map(|s| self.forward_slice(&mut state, s, false, &mut rng, recorder.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&outs)
    }

    /// Copy parameter values from another model with the same layout.
    pub fn load_params(&mut self, params: &[Parameter<T>]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(params) {
            if dst.name != src.name || dst.shape() != src.shape() {
                return Err(Error::invalid(format!(
                    "parameter mismatch: `{}` {:?} vs `{}` {:?}",
                    dst.name,
                    dst.shape(),
                    src.name,
                    src.shape()
                )));
            }
            dst.assign(src.value.data())?;
        }
        Ok(())
    }
}

fn push<T: Scalar>(params: &mut Vec<Parameter<T>>, name: &str, t: Tensor<T>) -> usize {
    params.push(Parameter::new(name, t));
    params.len() - 1
}

fn push_conv_weight<T: Scalar, R: Rng + ?Sized>(
    params: &mut Vec<Parameter<T>>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) -> usize {
    let fan_in = (c_in * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..c_out * c_in * k * k)
        .map(|_| T::lit(rng.gen_range(-bound..bound)))
        .collect();
    let t = Tensor::new(vec![c_out, c_in, k, k], data).expect("conv weight shape");
    push(params, name, t)
}
