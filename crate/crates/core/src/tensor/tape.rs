//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward sweep. A tape is single use: `backward` consumes the
//! recorded graph and any further op or backward call is rejected.

use rand::Rng;

use super::kernels::{self, ConvDims, GroupNormCache};
use super::Tensor;
use crate::error::{Error, Result};
use crate::losses;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var, planes: usize, h: usize, w: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, cache: GroupNormCache<T> },
    Mask { x: Var, mask: Vec<T> },
    Sigmoid { x: Var },
    Concat { a: Var, b: Var, n: usize, a_stride: usize, b_stride: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    ScaleBy { s: Var, x: Var },
    Spike { v: Var },
    Sum { x: Var },
    SumSquares { x: Var },
    Bce { pred: Var, target: Vec<T> },
    Dice { pred: Var, target: Vec<T>, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients of leaf nodes produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf, `None` when the leaf does not require grad or is
    /// unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape(format!("{name} recorded on a consumed tape")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        value.requires_grad = inputs.iter().any(|&i| self.needs_grad(i));
        value.grad = None;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input tensor. Its `requires_grad` flag decides whether
    /// gradients are produced for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape("leaf recorded on a consumed tape".into()));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let mut t = t;
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::Rank { op, expected: sa.len(), actual: sb.to_vec() });
        }
        for (i, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(Error::ShapeMismatch { op, axis: axis_name(sa.len(), i), expected: x, actual: y });
            }
        }
        Ok(())
    }

    fn nchw(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::Rank { op, expected: 4, actual: s.to_vec() }),
        }
    }

    /// Zero-padded "same" convolution with an odd square kernel.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, c_in, h, wd] = self.nchw("conv2d_same", x)?;
        let (c_out, k) = match *self.shape(w) {
            [co, ci, kh, kw] => {
                if ci != c_in {
                    return Err(Error::ShapeMismatch { op: "conv2d_same", axis: "C_in", expected: c_in, actual: ci });
                }
                if kh != kw {
                    return Err(Error::ShapeMismatch { op: "conv2d_same", axis: "kernel width", expected: kh, actual: kw });
                }
                if kh % 2 == 0 {
                    return Err(Error::invalid(format!("conv2d_same needs an odd kernel, got {kh}")));
                }
                (co, kh)
            }
            ref s => return Err(Error::Rank { op: "conv2d_same", expected: 4, actual: s.to_vec() }),
        };
        if self.shape(b) != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_same",
                axis: "bias C_out",
                expected: c_out,
                actual: self.value(b).len(),
            });
        }
        if h == 0 || wd == 0 {
            return Err(Error::invalid("conv2d_same on empty spatial dims"));
        }
        let dims = ConvDims { n, c_in, c_out, h, w: wd, k };
        let mut out = vec![T::zero(); n * c_out * h * wd];
        kernels::conv2d_forward(dims, self.value(x).data(), self.value(w).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(vec![n, c_out, h, wd], out)?;
        self.push(t, Op::Conv2d { x, w, b, dims }, &[x, w, b], "conv2d_same")
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw("max_pool2", x)?;
        if h % 2 != 0 {
            return Err(Error::ShapeMismatch { op: "max_pool2", axis: "H (must be even)", expected: h + 1, actual: h });
        }
        if w % 2 != 0 {
            return Err(Error::ShapeMismatch { op: "max_pool2", axis: "W (must be even)", expected: w + 1, actual: w });
        }
        let (out, argmax) = kernels::max_pool2_forward(n * c, h, w, self.value(x).data());
        let t = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push(t, Op::MaxPool2 { x, argmax }, &[x], "max_pool2")
    }

    pub fn upsample_nn2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw("upsample_nn2", x)?;
        let out = kernels::upsample_nn2_forward(n * c, h, w, self.value(x).data());
        let t = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        self.push(t, Op::Upsample2 { x, planes: n * c, h, w }, &[x], "upsample_nn2")
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let [n, c, h, w] = self.nchw("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("group_norm: eps must be positive"));
        }
        for (v, what) in [(gamma, "gamma C"), (beta, "beta C")] {
            if self.shape(v) != [c] {
                return Err(Error::ShapeMismatch { op: "group_norm", axis: what, expected: c, actual: self.value(v).len() });
            }
        }
        let (out, cache) = kernels::group_norm_forward(
            n,
            c,
            h * w,
            groups,
            eps,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(vec![n, c, h, w], out)?;
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, cache }, &[x, gamma, beta], "group_norm")
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Mask { x, mask }, &[x], "dropout")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::sigmoid_scalar);
        self.push(t, Op::Sigmoid { x }, &[x], "sigmoid")
    }

    /// Concatenate two NCHW maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.nchw("concat_channels", a)?;
        let [nb, cb, hb, wb] = self.nchw("concat_channels", b)?;
        for (axis, e, g) in [("N", n, nb), ("H", h, hb), ("W", w, wb)] {
            if e != g {
                return Err(Error::ShapeMismatch { op: "concat_channels", axis, expected: e, actual: g });
            }
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&self.value(b).data()[i * sb..(i + 1) * sb]);
        }
        let t = Tensor::new(vec![n, ca + cb, h, w], data)?;
        self.push(t, Op::Concat { a, b, n, a_stride: sa, b_stride: sb }, &[a, b], "concat_channels")
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub { a, b }, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c }, &[x], "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar { x }, &[x], "add_scalar")
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let t = self.value(x).map(|v| v * sv);
        self.push(t, Op::ScaleBy { s, x }, &[s, x], "scale_by")
    }

    /// Heaviside step `v >= 0` whose backward pass uses the arctan surrogate.
    pub fn spike(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).map(|x| if x >= T::zero() { T::one() } else { T::zero() });
        self.push(t, Op::Spike { v }, &[v], "spike")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum { x }, &[x], "sum")
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x }, &[x], "sum_squares")
    }

    /// Mean binary cross-entropy against a constant target.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = losses::bce_value(self.value(pred), target)?;
        let target = target.data().to_vec();
        self.push(Tensor::scalar(loss), Op::Bce { pred, target }, &[pred], "bce_loss")
    }

    /// Channel-averaged soft Dice loss against a constant target.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, eps: T) -> Result<Var> {
        let loss = losses::dice_value(self.value(pred), target, eps)?;
        let target = target.data().to_vec();
        self.push(Tensor::scalar(loss), Op::Dice { pred, target, eps }, &[pred], "dice_loss")
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("backward called on a consumed tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].value.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.value.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape matches leaf"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn axis_name(rank: usize, i: usize) -> &'static str {
    match (rank, i) {
        (4, 0) => "N",
        (4, 1) => "C",
        (4, 2) => "H",
        (4, 3) => "W",
        (_, 0) => "axis 0",
        (_, 1) => "axis 1",
        (_, 2) => "axis 2",
        _ => "trailing axis",
    }
}

/// Returns a zeroed accumulator for `v` if it needs a gradient.
fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].value.requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
    if let Some(acc) = slot(nodes, grads, v) {
        for (i, a) in acc.iter_mut().enumerate() {
            *a = *a + f(i);
        }
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::Conv2d { x, w, b, dims } => {
            let mut gx = slot(nodes, grads, x).map(std::mem::take);
            let mut gw = slot(nodes, grads, w).map(std::mem::take);
            let mut gb = slot(nodes, grads, b).map(std::mem::take);
            kernels::conv2d_backward(
                dims,
                val(x),
                val(w),
                g,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            for (v, buf) in [(x, gx), (w, gw), (b, gb)] {
                if let Some(buf) = buf {
                    grads[v.0] = Some(buf);
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(acc) = slot(nodes, grads, *x) {
                for (&i, &gv) in argmax.iter().zip(g) {
                    acc[i] = acc[i] + gv;
                }
            }
        }
        &Op::Upsample2 { x, planes, h, w } => {
            if let Some(acc) = slot(nodes, grads, x) {
                kernels::upsample_nn2_backward(planes, h, w, g, acc);
            }
        }
        Op::GroupNorm { x, gamma, beta, groups, cache } => {
            let [n, c, h, w] = match *nodes[x.0].value.shape() {
                [n, c, h, w] => [n, c, h, w],
                _ => unreachable!("group_norm input validated as NCHW"),
            };
            let mut gx = slot(nodes, grads, *x).map(std::mem::take);
            let mut gg = slot(nodes, grads, *gamma).map(std::mem::take);
            let mut gb = slot(nodes, grads, *beta).map(std::mem::take);
            kernels::group_norm_backward(
                n,
                c,
                h * w,
                *groups,
                cache,
                val(*gamma),
                g,
                gx.as_deref_mut(),
                gg.as_deref_mut(),
                gb.as_deref_mut(),
            );
            for (v, buf) in [(*x, gx), (*gamma, gg), (*beta, gb)] {
                if let Some(buf) = buf {
                    grads[v.0] = Some(buf);
                }
            }
        }
        Op::Mask { x, mask } => accumulate(nodes, grads, *x, |i| g[i] * mask[i]),
        &Op::Sigmoid { x } => {
            let y = node.value.data();
            accumulate(nodes, grads, x, |i| g[i] * y[i] * (T::one() - y[i]));
        }
        &Op::Concat { a, b, n, a_stride, b_stride } => {
            let row = a_stride + b_stride;
            accumulate(nodes, grads, a, |i| g[(i / a_stride) * row + i % a_stride]);
            accumulate(nodes, grads, b, |i| g[(i / b_stride) * row + a_stride + i % b_stride]);
            debug_assert_eq!(g.len(), n * row);
        }
        &Op::Add { a, b } => {
            accumulate(nodes, grads, a, |i| g[i]);
            accumulate(nodes, grads, b, |i| g[i]);
        }
        &Op::Sub { a, b } => {
            accumulate(nodes, grads, a, |i| g[i]);
            accumulate(nodes, grads, b, |i| -g[i]);
        }
        &Op::Mul { a, b } => {
            let (va, vb) = (val(a), val(b));
            accumulate(nodes, grads, a, |i| g[i] * vb[i]);
            accumulate(nodes, grads, b, |i| g[i] * va[i]);
        }
        &Op::Scale { x, c } => accumulate(nodes, grads, x, |i| g[i] * c),
        &Op::AddScalar { x } => accumulate(nodes, grads, x, |i| g[i]),
        &Op::ScaleBy { s, x } => {
            let sv = val(s)[0];
            let vx = val(x);
            let ds = g.iter().zip(vx).fold(T::zero(), |a, (&gi, &xi)| a + gi * xi);
            accumulate(nodes, grads, s, |_| ds);
            accumulate(nodes, grads, x, |i| g[i] * sv);
        }
        &Op::Spike { v } => {
            let vv = val(v);
            accumulate(nodes, grads, v, |i| g[i] * kernels::surrogate_grad(vv[i]));
        }
        &Op::Sum { x } => accumulate(nodes, grads, x, |_| g[0]),
        &Op::SumSquares { x } => {
            let vx = val(x);
            let two = T::lit(2.0);
            accumulate(nodes, grads, x, |i| g[0] * two * vx[i]);
        }
        Op::Bce { pred, target } => {
            let grad = losses::bce_grad(&nodes[pred.0].value, target);
            accumulate(nodes, grads, *pred, |i| g[0] * grad[i]);
        }
        Op::Dice { pred, target, eps } => {
            let grad = losses::dice_grad(&nodes[pred.0].value, target, *eps);
            accumulate(nodes, grads, *pred, |i| g[0] * grad[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sum_of_product_grad_is_other_factor() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]).with_requires_grad(true)).unwrap();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let p = tape.mul(w, x).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(g.wrt(x).is_none());
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1], &[0.0]).with_requires_grad(true)).unwrap();
        let s = tape.sigmoid(w).unwrap();
        let l = tape.scale(s, 3.0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[0.75]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true)).unwrap();
        let y = tape.scale(w, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.is_empty());
        assert!(matches!(tape.backward(l), Err(Error::Tape(_))));
        assert!(tape.leaf(t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn conv_identity_scaled_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0f64)).unwrap();
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let b = tape.constant(t(&[1], &[0.0])).unwrap();
        let y = tape.conv2d_same(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_shape_error_names_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 3, 3])).unwrap();
        let w = tape.constant(Tensor::zeros(vec![1, 3, 3, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(vec![1])).unwrap();
        match tape.conv2d_same(x, w, b) {
            Err(Error::ShapeMismatch { axis, expected: 2, actual: 3, .. }) => assert_eq!(axis, "C_in"),
            other => panic!("unexpected {other:?}"),
        }
        let w = tape.constant(Tensor::zeros(vec![1, 2, 2, 2])).unwrap();
        assert!(tape.conv2d_same(x, w, b).is_err());
    }

    #[test]
    fn max_pool_values_and_tie_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad(true)).unwrap();
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 2, 2], 5.0f64).with_requires_grad(true)).unwrap();
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_odd_dims() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 3, 4])).unwrap();
        assert!(tape.max_pool2(x).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.upsample_nn2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 4]);
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.upsample_nn2(x).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(tape.value(y).data(), &expected);
    }

    #[test]
    fn group_norm_closed_forms() {
        let mut tape = Tape::new();
        let gamma = tape.constant(t(&[1], &[1.0])).unwrap();
        let beta = tape.constant(t(&[1], &[0.0])).unwrap();
        let x = tape.constant(Tensor::full(vec![1, 1, 2, 2], 3.0f64)).unwrap();
        let y = tape.group_norm(x, 1, gamma, beta, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(t(&[1, 1, 1, 2], &[1.0, 3.0])).unwrap();
        let y = tape.group_norm(x, 1, gamma, beta, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);

        let x = tape.constant(Tensor::zeros(vec![1, 3, 1, 1])).unwrap();
        let g3 = tape.constant(Tensor::full(vec![3], 1.0)).unwrap();
        assert!(tape.group_norm(x, 2, g3, g3, 1e-5).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_bad_rate() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.7, false, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn concat_channel_counts_add() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 2, 3, 3])).unwrap();
        let b = tape.constant(Tensor::full(vec![2, 3, 3, 3], 1.0)).unwrap();
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 5, 3, 3]);
        // second sample starts with the two zero channels of `a`
        assert_eq!(tape.value(c).data()[45], 0.0);
        assert_eq!(tape.value(c).data()[45 + 18], 1.0);
    }

    #[test]
    fn nonfinite_values_are_rejected() {
        let mut tape = Tape::<f32>::new();
        assert!(matches!(
            tape.leaf(Tensor::full(vec![1], f32::NAN)),
            Err(Error::NonFinite { .. })
        ));
        let x = tape.constant(Tensor::full(vec![1], 3e38)).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }
}
