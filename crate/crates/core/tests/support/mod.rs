//! Shared oracles for the integration tests.
//!
//! Everything here is written independently of the library internals: finite
//! differences, straight-line optimizer recurrences, closed-form losses.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeseg::data::{extract_slices, preprocess, synth_phantom, PhantomConfig};
use spikeseg::fptt::{fptt_step, regularized_loss, FpttState, InnerOptimizer, TrainConfig};
use spikeseg::spiking::LifState;
use spikeseg::tensor::{surrogate_sigmoid, Parameter};
use spikeseg::{MultiModalVolume, Result, Tape, Tensor, Var, View, ViewSlices};

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values at least `gap` apart, so max selections are stable under
/// a finite-difference nudge.
pub fn spaced(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * gap - n as f64 * gap / 2.0).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compare tape gradients against central differences for every input.
/// `build` records a scalar loss from leaves holding `inputs`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).item().unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (k, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Reduce a tensor node to a scalar with fixed random weights so every
/// output element carries a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = uniform(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0);
    let w = tape.constant(w)?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

pub const OP_NAMES: [&str; 17] = [
    "conv2d_same",
    "max_pool2",
    "upsample_nn2",
    "group_norm",
    "dropout",
    "sigmoid",
    "concat_channels",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "scale_by",
    "sum",
    "sum_squares",
    "bce_loss",
    "dice_loss",
];

/// Worst relative gradient error of one op on random inputs from `seed`.
pub fn op_gradcheck(op: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    match op {
        "conv2d_same" => {
            let k = if seed % 2 == 0 { 3 } else { 1 };
            let ins = [
                uniform(&mut r, &[2, 3, 5, 4], -1.0, 1.0),
                uniform(&mut r, &[4, 3, k, k], -0.5, 0.5),
                uniform(&mut r, &[4], -0.5, 0.5),
            ];
            gradcheck(&ins, |t, v| {
                let y = t.conv2d_same(v[0], v[1], v[2])?;
                weighted_sum(t, y, seed)
            })
        }
        "max_pool2" => {
            let ins = [spaced(&mut r, &[2, 2, 4, 6], 0.01)];
            gradcheck(&ins, |t, v| {
                let y = t.max_pool2(v[0])?;
                weighted_sum(t, y, seed)
            })
        }
        "upsample_nn2" => {
            let ins = [uniform(&mut r, &[1, 2, 3, 2], -1.0, 1.0)];
            gradcheck(&ins, |t, v| {
                let y = t.upsample_nn2(v[0])?;
                weighted_sum(t, y, seed)
            })
        }
        "group_norm" => {
            let ins = [
                uniform(&mut r, &[2, 4, 3, 3], -2.0, 2.0),
                uniform(&mut r, &[4], 0.5, 1.5),
                uniform(&mut r, &[4], -0.5, 0.5),
            ];
            gradcheck(&ins, |t, v| {
                let y = t.group_norm(v[0], 2, v[1], v[2], 1e-5)?;
                weighted_sum(t, y, seed)
            })
        }
        "dropout" => {
            let ins = [uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0)];
            gradcheck(&ins, |t, v| {
                let mut mask_rng = rng(seed.wrapping_add(1));
                let y = t.dropout(v[0], 0.3, true, &mut mask_rng)?;
                weighted_sum(t, y, seed)
            })
        }
        "sigmoid" => unary(&mut r, seed, |t, x| t.sigmoid(x)),
        "scale" => unary(&mut r, seed, |t, x| t.scale(x, -1.7)),
        "add_scalar" => unary(&mut r, seed, |t, x| t.add_scalar(x, 0.3)),
        "sum" => {
            let ins = [uniform(&mut r, &[3, 4], -1.0, 1.0)];
            gradcheck(&ins, |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            })
        }
        "sum_squares" => {
            let ins = [uniform(&mut r, &[3, 4], -1.0, 1.0)];
            gradcheck(&ins, |t, v| t.sum_squares(v[0]))
        }
        "add" => binary(&mut r, seed, |t, a, b| t.add(a, b)),
        "sub" => binary(&mut r, seed, |t, a, b| t.sub(a, b)),
        "mul" => binary(&mut r, seed, |t, a, b| t.mul(a, b)),
        "concat_channels" => {
            let ins = [uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0)];
            gradcheck(&ins, |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                weighted_sum(t, y, seed)
            })
        }
        "scale_by" => {
            let ins = [uniform(&mut r, &[1], -1.0, 1.0), uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0)];
            gradcheck(&ins, |t, v| {
                let y = t.scale_by(v[0], v[1])?;
                weighted_sum(t, y, seed)
            })
        }
        "bce_loss" => {
            let target = binary_target(&mut r, &[2, 3, 4, 4]);
            let ins = [uniform(&mut r, &[2, 3, 4, 4], 0.05, 0.95)];
            gradcheck(&ins, |t, v| t.bce_loss(v[0], &target))
        }
        "dice_loss" => {
            let target = binary_target(&mut r, &[2, 3, 4, 4]);
            let ins = [uniform(&mut r, &[2, 3, 4, 4], 0.05, 0.95)];
            gradcheck(&ins, |t, v| t.dice_loss(v[0], &target, 1e-5))
        }
        other => panic!("unknown op {other}"),
    }
}

fn unary(r: &mut ChaCha8Rng, seed: u64, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> f64 {
    let ins = [uniform(r, &[2, 3, 4], -2.0, 2.0)];
    gradcheck(&ins, |t, v| {
        let y = f(t, v[0])?;
        weighted_sum(t, y, seed)
    })
}

fn binary(r: &mut ChaCha8Rng, seed: u64, f: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> f64 {
    let ins = [uniform(r, &[2, 3, 4], -2.0, 2.0), uniform(r, &[2, 3, 4], -2.0, 2.0)];
    gradcheck(&ins, |t, v| {
        let y = f(t, v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
}

pub fn binary_target(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Gradient of a two-step PLIF layer with respect to its leak logit and the
/// second-step input, checked against a smooth oracle.
///
/// Step one runs untracked and is carried as a constant. On step two the
/// loss is `Σ c · spike(u₂ − θ)`; the surrogate gradient equals the exact
/// derivative of `Σ c · σ(u₂ − θ)` with `σ` the arctan sigmoid, which the
/// oracle differentiates numerically.
pub fn plif_surrogate_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [1, 2, 3, 3];
    let theta = 1.0;
    let a: f64 = r.gen_range(-1.5..2.5);
    let i1 = uniform(&mut r, &shape, -0.5, 2.0);
    let i2 = uniform(&mut r, &shape, -0.5, 2.0);
    let c = uniform(&mut r, &shape, -1.0, 1.0);

    // step one, by hand, from rest
    let u1: Vec<f64> = i1.data().to_vec();
    let s1: Vec<f64> = u1.iter().map(|&u| if u - theta >= 0.0 { 1.0 } else { 0.0 }).collect();

    let mut state = LifState::zeros(&shape, theta);
    state.u = Tensor::new(shape.to_vec(), u1.clone()).unwrap();
    state.s_prev = Tensor::new(shape.to_vec(), s1.clone()).unwrap();

    let mut tape = Tape::new();
    let leak = tape.leaf(Tensor::new(vec![1], vec![a]).unwrap().with_requires_grad(true)).unwrap();
    let input = tape.leaf(i2.clone().with_requires_grad(true)).unwrap();
    let out = spikeseg::spiking::plif_on_tape(&mut tape, leak, &state, input).unwrap();
    let loss = {
        let cv = tape.constant(c.clone()).unwrap();
        let p = tape.mul(out.spikes, cv).unwrap();
        tape.sum(p).unwrap()
    };
    let grads = tape.backward(loss).unwrap();
    let mut analytic = grads.wrt(leak).unwrap().data().to_vec();
    analytic.extend_from_slice(grads.wrt(input).unwrap().data());

    let smooth = |a: f64, i2: &[f64]| -> f64 {
        let lam = 1.0 / (1.0 + (-a).exp());
        (0..u1.len())
            .map(|j| {
                let u2 = lam * u1[j] + i2[j] - theta * s1[j];
                c.data()[j] * surrogate_sigmoid(u2 - theta)
            })
            .sum()
    };
    let h = FD_STEP;
    let mut numeric = vec![(smooth(a + h, i2.data()) - smooth(a - h, i2.data())) / (2.0 * h)];
    for j in 0..i2.len() {
        let mut p = i2.data().to_vec();
        p[j] += h;
        let mut m = i2.data().to_vec();
        m[j] -= h;
        numeric.push((smooth(a, &p) - smooth(a, &m)) / (2.0 * h));
    }
    rel_err(&analytic, &numeric)
}

/// One oracle update of the full optimizer on flat `f64` parameters.
pub struct OracleFptt {
    pub w: Vec<f64>,
    pub wbar: Vec<f64>,
    pub ltrace: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl OracleFptt {
    pub fn new(w: Vec<f64>) -> Self {
        let n = w.len();
        Self { wbar: w.clone(), w, ltrace: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n], steps: 0 }
    }

    /// Gradient of `l(w) + (α/2)‖w − w̄ − ltrace/(2α)‖²` for a task gradient `g_task`.
    pub fn total_grad(&self, g_task: &[f64], alpha: f64) -> Vec<f64> {
        (0..self.w.len())
            .map(|j| g_task[j] + alpha * (self.w[j] - self.wbar[j] - self.ltrace[j] / (2.0 * alpha)))
            .collect()
    }

    pub fn step(&mut self, mut g: Vec<f64>, cfg: &TrainConfig) {
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            g.iter_mut().for_each(|x| *x *= s);
        }
        self.steps += 1;
        let a = cfg.alpha;
        for j in 0..self.w.len() {
            let w_t = self.w[j];
            let dir = match cfg.optimizer {
                InnerOptimizer::Sgd => g[j],
                InnerOptimizer::Adam => {
                    self.m[j] = cfg.beta1 * self.m[j] + (1.0 - cfg.beta1) * g[j];
                    self.v[j] = cfg.beta2 * self.v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                    let mh = self.m[j] / (1.0 - cfg.beta1.powi(self.steps));
                    let vh = self.v[j] / (1.0 - cfg.beta2.powi(self.steps));
                    mh / (vh.sqrt() + cfg.adam_eps)
                }
            };
            let w_next = w_t - cfg.lr * dir - cfg.lr * cfg.weight_decay * w_t;
            self.ltrace[j] -= a * (w_t - self.wbar[j]);
            self.wbar[j] = 0.5 * (self.wbar[j] + w_next) - self.ltrace[j] / (2.0 * a);
            self.w[j] = w_next;
        }
    }
}

/// Outcome of comparing one library trajectory against the oracle.
pub struct TrajectoryCheck {
    pub max_abs_diff: f64,
    pub tape_nodes: Vec<usize>,
}

/// Quadratic task `l_t(w) = ½ Σ (w_j x_t − y_{t,j})²` over scalar parameters.
pub fn fptt_trajectory(seed: u64, steps: usize, cfg: &TrainConfig) -> TrajectoryCheck {
    let mut r = rng(seed);
    let n_params = r.gen_range(1..=3);
    let init: Vec<f64> = (0..n_params).map(|_| r.gen_range(-1.0..1.0)).collect();
    let data: Vec<(f64, Vec<f64>)> = (0..steps)
        .map(|_| (r.gen_range(-2.0..2.0), (0..n_params).map(|_| r.gen_range(-2.0..2.0)).collect()))
        .collect();

    let mut params: Vec<Parameter<f64>> = init
        .iter()
        .enumerate()
        .map(|(j, &w)| Parameter::new(format!("w{j}"), Tensor::new(vec![1], vec![w]).unwrap()))
        .collect();
    let mut state = FpttState::new(&params, cfg.alpha, cfg.lr).unwrap();
    let mut oracle = OracleFptt::new(init);
    let mut max_abs_diff: f64 = 0.0;
    let mut tape_nodes = Vec::with_capacity(steps);

    for (x, y) in &data {
        let mut tape = Tape::new();
        let bound: Vec<Var> = params
            .iter()
            .map(|p| tape.leaf(p.value.clone().with_requires_grad(true)).unwrap())
            .collect();
        let mut terms = Vec::new();
        for (j, &b) in bound.iter().enumerate() {
            let scaled = tape.scale(b, *x).unwrap();
            let shifted = tape.add_scalar(scaled, -y[j]).unwrap();
            terms.push(tape.sum_squares(shifted).unwrap());
        }
        let mut task = terms[0];
        for &t in &terms[1..] {
            task = tape.add(task, t).unwrap();
        }
        let task = tape.scale(task, 0.5).unwrap();
        let (_, total) = regularized_loss(&mut tape, task, &params, &bound, &state).unwrap();
        tape_nodes.push(tape.len());
        let grads = tape.backward(total).unwrap();
        for (p, &b) in params.iter_mut().zip(&bound) {
            p.value.grad = grads.wrt(b).map(|g| g.data().to_vec());
        }
        fptt_step(&mut params, &mut state, cfg).unwrap();

        let g_task: Vec<f64> = (0..n_params).map(|j| (oracle.w[j] * x - y[j]) * x).collect();
        let g = oracle.total_grad(&g_task, cfg.alpha);
        oracle.step(g, cfg);

        for j in 0..n_params {
            let lib = [params[j].value.data()[0], state.wbar[j][0], state.ltrace[j][0]];
            let ora = [oracle.w[j], oracle.wbar[j], oracle.ltrace[j]];
            for (a, b) in lib.iter().zip(&ora) {
                max_abs_diff = max_abs_diff.max((a - b).abs());
            }
        }
    }
    TrajectoryCheck { max_abs_diff, tape_nodes }
}

/// Cropped, normalized phantom.
pub fn phantom(seed: u64, dims: [usize; 3]) -> MultiModalVolume {
    let v = synth_phantom(seed, dims, &PhantomConfig::default()).unwrap();
    preprocess(&v, dims).unwrap()
}

pub fn phantom_slices(seed: u64, dims: [usize; 3], view: View) -> ViewSlices {
    extract_slices(&phantom(seed, dims), view, format!("phantom-{seed:03}")).unwrap()
}
