//! Forward and backward kernels on plain tensors.
//!
//! These are the only places that touch raw buffers. The autodiff graph in
//! [`crate::autodiff`] calls into them, and so do the inference helpers. All
//! loops run in a fixed order, so results are bit-identical across runs.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Clamp { lo: f64, hi: f64 },
    Scale(f64),
}

/// Applies an elementwise op. Binary kinds need `b` with the same shape as `a`.
pub fn elementwise<T: Real>(kind: Elementwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let binary = |f: fn(T, T) -> T| -> Result<Tensor<T>> {
        let b = b.ok_or_else(|| Error::InvalidArgument(format!("{kind:?} needs two operands")))?;
        if a.shape() != b.shape() {
            return Err(shape_err("elementwise", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    let out = match kind {
        Elementwise::Add => binary(|x, y| x + y)?,
        Elementwise::Sub => binary(|x, y| x - y)?,
        Elementwise::Mul => binary(|x, y| x * y)?,
        Elementwise::Tanh => a.map(|x| x.tanh()),
        Elementwise::Sigmoid => a.map(sigmoid),
        Elementwise::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("clamp bounds inverted: {lo} > {hi}")));
            }
            let (lo, hi) = (T::of(lo), T::of(hi));
            a.map(|x| x.max(lo).min(hi))
        }
        Elementwise::Scale(c) => {
            let c = T::of(c);
            a.map(|x| x * c)
        }
    };
    out.checked("elementwise")
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err("matmul", format!("{:?} · {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)?.checked("matmul")
}

pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `g[m×n] · b[k×n]ᵀ`, accumulated into `out[m×k]`.
pub(crate) fn gemm_grad_a<T: Real>(m: usize, k: usize, n: usize, g: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `a[m×k]ᵀ · g[m×n]`, accumulated into `out[k×n]`.
pub(crate) fn gemm_grad_b<T: Real>(m: usize, k: usize, n: usize, a: &[T], g: &[T], out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Stride and zero padding of a 2-D cross-correlation, as `(height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Resolved sizes of one conv2d invocation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: Conv2dGeometry,
}

impl ConvDims {
    pub(crate) fn resolve(x: &[usize], k: &[usize], bias: &[usize], geom: Conv2dGeometry) -> Result<Self> {
        let (&[h, w, cin], &[cout, kcin, kh, kw]) = (x, k) else {
            return Err(shape_err("conv2d", format!("input {x:?} must be H×W×C, kernel {k:?} must be Cout×Cin×kh×kw")));
        };
        if kcin != cin {
            return Err(shape_err("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if bias != [cout] {
            return Err(shape_err("conv2d", format!("bias {bias:?} for {cout} output channels")));
        }
        let (sh, sw) = geom.stride;
        let (ph, pw) = geom.padding;
        if sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument("conv stride must be at least 1".into()));
        }
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(shape_err(
                "conv",
                format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * ph, w + 2 * pw),
            ));
        }
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (w + 2 * pw - kw) / sw + 1;
        Ok(ConvDims { h, w, cin, cout, kh, kw, ho, wo, geom })
    }

    fn input_index(&self, o: usize, kk: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + kk).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }
}

/// Kernel reordered from `[cout][cin][kh][kw]` to `[kh][kw][cin][cout]`.
fn kernel_to_hwio<T: Real>(d: &ConvDims, k: &[T]) -> Vec<T> {
    let mut kt = vec![T::zero(); k.len()];
    for co in 0..d.cout {
        for ci in 0..d.cin {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    kt[((ky * d.kw + kx) * d.cin + ci) * d.cout + co] = k[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                }
            }
        }
    }
    kt
}

fn kernel_from_hwio<T: Real>(d: &ConvDims, kt: &[T]) -> Vec<T> {
    let mut k = vec![T::zero(); kt.len()];
    for co in 0..d.cout {
        for ci in 0..d.cin {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    k[((co * d.cin + ci) * d.kh + ky) * d.kw + kx] = kt[((ky * d.kw + kx) * d.cin + ci) * d.cout + co];
                }
            }
        }
    }
    k
}

pub(crate) fn conv2d_raw<T: Real>(d: &ConvDims, x: &[T], k: &[T], bias: &[T]) -> Vec<T> {
    let kt = kernel_to_hwio(d, k);
    let mut out = vec![T::zero(); d.ho * d.wo * d.cout];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let o = &mut out[(oy * d.wo + ox) * d.cout..][..d.cout];
            o.copy_from_slice(bias);
            for ky in 0..d.kh {
                let Some(iy) = d.input_index(oy, ky, d.geom.stride.0, d.geom.padding.0, d.h) else { continue };
                for kx in 0..d.kw {
                    let Some(ix) = d.input_index(ox, kx, d.geom.stride.1, d.geom.padding.1, d.w) else { continue };
                    let xs = &x[(iy * d.w + ix) * d.cin..][..d.cin];
                    let kbase = (ky * d.kw + kx) * d.cin * d.cout;
                    for (ci, &v) in xs.iter().enumerate() {
                        if v == T::zero() {
                            continue;
                        }
                        let krow = &kt[kbase + ci * d.cout..][..d.cout];
                        for (acc, &kv) in o.iter_mut().zip(krow) {
                            *acc += v * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of conv2d with respect to input (if requested), kernel and bias.
pub(crate) fn conv2d_backward_raw<T: Real>(
    d: &ConvDims,
    x: &[T],
    k: &[T],
    g: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let kt = kernel_to_hwio(d, k);
    let mut gkt = vec![T::zero(); kt.len()];
    let mut gx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut gb = vec![T::zero(); d.cout];
    for oy in 0..d.ho {
        for ox in 0..d.wo {
            let go = &g[(oy * d.wo + ox) * d.cout..][..d.cout];
            for (b, &v) in gb.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..d.kh {
                let Some(iy) = d.input_index(oy, ky, d.geom.stride.0, d.geom.padding.0, d.h) else { continue };
                for kx in 0..d.kw {
                    let Some(ix) = d.input_index(ox, kx, d.geom.stride.1, d.geom.padding.1, d.w) else { continue };
                    let xbase = (iy * d.w + ix) * d.cin;
                    let kbase = (ky * d.kw + kx) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let off = kbase + ci * d.cout;
                        let v = x[xbase + ci];
                        if v != T::zero() {
                            for (acc, &gv) in gkt[off..off + d.cout].iter_mut().zip(go) {
                                *acc += v * gv;
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            let mut s = T::zero();
                            for (&kv, &gv) in kt[off..off + d.cout].iter().zip(go) {
                                s += kv * gv;
                            }
                            gx[xbase + ci] += s;
                        }
                    }
                }
            }
        }
    }
    (gx, kernel_from_hwio(d, &gkt), gb)
}

/// 2-D cross-correlation of `input[H×W×C_in]` with `kernel[C_out×C_in×kh×kw]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let d = ConvDims::resolve(input.shape(), kernel.shape(), bias.shape(), geom)?;
    let out = conv2d_raw(&d, input.data(), kernel.data(), bias.data());
    Tensor::new(vec![d.ho, d.wo, d.cout], out)?.checked("conv2d")
}

pub(crate) fn conv1d_dims(x: &[usize], k: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<ConvDims> {
    let (&[l, cin], &[cout, kcin, ks]) = (x, k) else {
        return Err(shape_err("conv1d", format!("input {x:?} must be L×C, kernel {k:?} must be Cout×Cin×k")));
    };
    ConvDims::resolve(
        &[1, l, cin],
        &[cout, kcin, 1, ks],
        bias,
        Conv2dGeometry { stride: (1, stride), padding: (0, padding) },
    )
}

/// 1-D cross-correlation of `input[L×C_in]` with `kernel[C_out×C_in×k]`, zero padded.
pub fn conv1d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = conv1d_dims(input.shape(), kernel.shape(), bias.shape(), stride, padding)?;
    let out = conv2d_raw(&d, input.data(), kernel.data(), bias.data());
    Tensor::new(vec![d.wo, d.cout], out)?.checked("conv1d")
}

/// Bin `i` of `target` bins over `width` columns: `[floor(i·W/t), ceil((i+1)·W/t))`.
pub fn pool_bin(i: usize, width: usize, target: usize) -> (usize, usize) {
    let start = i * width / target;
    let end = ((i + 1) * width).div_ceil(target);
    (start, end)
}

/// Adaptive max pooling over the width of `input[H×W×C]`.
///
/// Returns the pooled tensor and, for each output element, the flat input
/// index it came from (ties resolve to the lowest column).
pub fn adaptive_max_pool_width<T: Real>(input: &Tensor<T>, target_w: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = input.dims3()?;
    if target_w == 0 {
        return Err(Error::InvalidArgument("adaptive pool target width must be at least 1".into()));
    }
    if target_w > w {
        return Err(shape_err("adaptive_max_pool_width", format!("target width {target_w} exceeds input width {w}")));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(h * target_w * c);
    let mut arg = Vec::with_capacity(h * target_w * c);
    for row in 0..h {
        for bin in 0..target_w {
            let (start, end) = pool_bin(bin, w, target_w);
            for ch in 0..c {
                let mut best = (row * w + start) * c + ch;
                for col in start + 1..end {
                    let idx = (row * w + col) * c + ch;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![h, target_w, c], out)?, arg))
}

fn last_axis<T: Real>(x: &Tensor<T>) -> (usize, usize) {
    let n = *x.shape().last().expect("tensors have rank >= 1");
    (x.len() / n, n)
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let (rows, n) = last_axis(x);
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let xs = &x.data()[r * n..(r + 1) * n];
        let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let o = &mut out[r * n..(r + 1) * n];
        let mut z = T::zero();
        for (oi, &xi) in o.iter_mut().zip(xs) {
            *oi = (xi - m).exp();
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi = *oi / z;
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.checked("softmax")
}

/// Log-softmax over the last axis.
pub fn log_softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "log_softmax" });
    }
    let (rows, n) = last_axis(x);
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let xs = &x.data()[r * n..(r + 1) * n];
        let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + xs.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(xs) {
            *o = v - lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.checked("log_softmax")
}
