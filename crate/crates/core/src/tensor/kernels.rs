//! Raw forward/backward kernels over flat NCHW buffers.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    /// Valid output column range for kernel column `kx`, together with the
    /// signed input shift.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize, isize) {
        let pad = self.k / 2;
        let shift = kx as isize - pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (self.w as isize - shift).min(self.w as isize).max(0) as usize;
        (lo, hi, shift)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    d: ConvDims,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let (hw, kk, pad) = (d.h * d.w, d.k * d.k, d.k / 2);
    for n in 0..d.n {
        for co in 0..d.c_out {
            let o = &mut out[(n * d.c_out + co) * hw..][..hw];
            o.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..d.c_in {
                let src = &input[(n * d.c_in + ci) * hw..][..hw];
                let wk = &weight[(co * d.c_in + ci) * kk..][..kk];
                for ky in 0..d.k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..d.k {
                        let wv = wk[ky * d.k + kx];
                        if wv.is_zero() {
                            continue;
                        }
                        let (lo, hi, dx) = d.col_range(kx);
                        for y in 0..d.h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= d.h as isize {
                                continue;
                            }
                            let orow = &mut o[y * d.w + lo..y * d.w + hi];
                            let base = (sy as usize * d.w) as isize + dx;
                            let srow = &src[(base + lo as isize) as usize..(base + hi as isize) as usize];
                            for (ov, &sv) in orow.iter_mut().zip(srow) {
                                *ov = *ov + wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients for input, weight and bias (each optional).
pub(crate) fn conv2d_backward<T: Scalar>(
    d: ConvDims,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_in: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    let (hw, kk, pad) = (d.h * d.w, d.k * d.k, d.k / 2);
    if let Some(gb) = grad_b {
        for n in 0..d.n {
            for co in 0..d.c_out {
                let g = &grad_out[(n * d.c_out + co) * hw..][..hw];
                gb[co] = gb[co] + g.iter().copied().sum::<T>();
            }
        }
    }
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = &grad_out[(n * d.c_out + co) * hw..][..hw];
            for ci in 0..d.c_in {
                let src_off = (n * d.c_in + ci) * hw;
                let w_off = (co * d.c_in + ci) * kk;
                for ky in 0..d.k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..d.k {
                        let (lo, hi, dx) = d.col_range(kx);
                        let wv = weight[w_off + ky * d.k + kx];
                        let mut acc = T::zero();
                        for y in 0..d.h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= d.h as isize {
                                continue;
                            }
                            let grow = &g[y * d.w + lo..y * d.w + hi];
                            let base = src_off as isize + (sy as usize * d.w) as isize + dx;
                            let (s0, s1) = ((base + lo as isize) as usize, (base + hi as isize) as usize);
                            if grad_w.is_some() {
                                let srow = &input[s0..s1];
                                acc = acc
                                    + grow
                                        .iter()
                                        .zip(srow)
                                        .fold(T::zero(), |a, (&gv, &sv)| a + gv * sv);
                            }
                            if let Some(gi) = grad_in.as_deref_mut() {
                                for (iv, &gv) in gi[s0..s1].iter_mut().zip(grow) {
                                    *iv = *iv + wv * gv;
                                }
                            }
                        }
                        if let Some(gw) = grad_w.as_deref_mut() {
                            let idx = w_off + ky * d.k + kx;
                            gw[idx] = gw[idx] + acc;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max pool; returns the flat argmax index into `input` for every output.
pub(crate) fn max_pool2_forward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    input: &[T],
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                // row-major scan; strict > keeps the first maximum
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample_nn2_forward<T: Scalar>(planes: usize, h: usize, w: usize, input: &[T]) -> Vec<T> {
    let ow = 2 * w;
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * 4 * h * w..][..4 * h * w];
        for y in 0..2 * h {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_nn2_backward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    grad_out: &[T],
    grad_in: &mut [T],
) {
    let ow = 2 * w;
    for p in 0..planes {
        let g = &grad_out[p * 4 * h * w..][..4 * h * w];
        let gi = &mut grad_in[p * h * w..][..h * w];
        for y in 0..2 * h {
            for x in 0..ow {
                let i = (y / 2) * w + x / 2;
                gi[i] = gi[i] + g[y * ow + x];
            }
        }
    }
}

/// Normalized activations and per-(sample, group) inverse std, cached for backward.
pub(crate) struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn group_norm_forward<T: Scalar>(
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: T,
    input: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, GroupNormCache<T>) {
    let cpg = c / groups;
    let m = cpg * hw;
    let mf = T::from_usize(m).unwrap();
    let mut out = vec![T::zero(); input.len()];
    let mut xhat = vec![T::zero(); input.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for s in 0..n {
        for g in 0..groups {
            let off = (s * c + g * cpg) * hw;
            let region = &input[off..off + m];
            let mean = region.iter().copied().sum::<T>() / mf;
            let var = region
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / mf;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for ch in 0..cpg {
                let cc = g * cpg + ch;
                for i in 0..hw {
                    let idx = off + ch * hw + i;
                    let xh = (input[idx] - mean) * is;
                    xhat[idx] = xh;
                    out[idx] = gamma[cc] * xh + beta[cc];
                }
            }
        }
    }
    (out, GroupNormCache { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Scalar>(
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    cache: &GroupNormCache<T>,
    gamma: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    grad_gamma: Option<&mut [T]>,
    grad_beta: Option<&mut [T]>,
) {
    let cpg = c / groups;
    let m = cpg * hw;
    let mf = T::from_usize(m).unwrap();
    if let Some(gg) = grad_gamma {
        for s in 0..n {
            for cc in 0..c {
                let off = (s * c + cc) * hw;
                let dot = grad_out[off..off + hw]
                    .iter()
                    .zip(&cache.xhat[off..off + hw])
                    .fold(T::zero(), |a, (&g, &x)| a + g * x);
                gg[cc] = gg[cc] + dot;
            }
        }
    }
    if let Some(gb) = grad_beta {
        for s in 0..n {
            for cc in 0..c {
                let off = (s * c + cc) * hw;
                gb[cc] = gb[cc] + grad_out[off..off + hw].iter().copied().sum::<T>();
            }
        }
    }
    if let Some(gi) = grad_in {
        for s in 0..n {
            for g in 0..groups {
                let off = (s * c + g * cpg) * hw;
                let is = cache.inv_std[s * groups + g];
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for ch in 0..cpg {
                    let gm = gamma[g * cpg + ch];
                    for i in 0..hw {
                        let idx = off + ch * hw + i;
                        let d = grad_out[idx] * gm;
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * cache.xhat[idx];
                    }
                }
                for ch in 0..cpg {
                    let gm = gamma[g * cpg + ch];
                    for i in 0..hw {
                        let idx = off + ch * hw + i;
                        let d = grad_out[idx] * gm;
                        gi[idx] = gi[idx] + is * (d - (sum_d + cache.xhat[idx] * sum_dx) / mf);
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Smooth stand-in for the Heaviside step: `atan(pi x) / pi + 1/2`.
#[inline]
pub fn surrogate_sigmoid<T: Scalar>(x: T) -> T {
    (T::PI() * x).atan() / T::PI() + T::lit(0.5)
}

/// Derivative of [`surrogate_sigmoid`]: `1 / (1 + (pi x)^2)`.
#[inline]
pub fn surrogate_grad<T: Scalar>(x: T) -> T {
    let px = T::PI() * x;
    (T::one() + px * px).recip()
}
