//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape. Inputs of
//! a node always precede it, so walking the tape backwards is a reverse
//! topological order and each node is visited exactly once. A graph can be
//! differentiated once; a second [`Graph::backward`] call is rejected.

use crate::ctc;
use crate::error::{shape_err, Error, Result};
use crate::ops::{self, Conv2dGeometry, ConvDims};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: T, hi: T },
    Scale(Var, T),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv { x: Var, k: Var, b: Var, dims: ConvDims },
    PoolWidth { x: Var, argmax: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Row { x: Var, row: usize },
    Narrow { x: Var, start: usize, len: usize },
    Sum(Var),
    MeanRows(Var),
    MeanWidth(Var),
    Pick { x: Var, index: usize },
    Ctc { x: Var, grad: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape of tensor operations.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Var>,
    differentiated: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Var>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()).expect("node shapes are valid"),
        }
    }

    /// Gradients of every trainable leaf, in registration order.
    pub fn params(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|&p| self.get_or_zeros(p)).collect()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new(), differentiated: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaves in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.push(v);
        v
    }

    pub fn leaf(&mut self, t: Tensor<T>, trainable: bool) -> Var {
        if trainable {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    fn binary(&mut self, kind: ops::Elementwise, a: Var, b: Var) -> Result<Var> {
        let out = ops::elementwise(kind, self.value(a), Some(self.value(b)))?;
        let op = match kind {
            ops::Elementwise::Add => Op::Add(a, b),
            ops::Elementwise::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ops::Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ops::Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ops::Elementwise::Mul, a, b)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = ops::elementwise(ops::Elementwise::Tanh, self.value(x), None)?;
        Ok(self.push(out, Op::Tanh(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ops::elementwise(ops::Elementwise::Sigmoid, self.value(x), None)?;
        Ok(self.push(out, Op::Sigmoid(x), &[x]))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = ops::elementwise(ops::Elementwise::Clamp { lo, hi }, self.value(x), None)?;
        Ok(self.push(out, Op::Clamp { x, lo: T::of(lo), hi: T::of(hi) }, &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = ops::elementwise(ops::Elementwise::Scale(c), self.value(x), None)?;
        Ok(self.push(out, Op::Scale(x, T::of(c)), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds `bias[n]` to every length-`n` slice along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = bv.len();
        if bv.rank() != 1 || xv.shape().last() != Some(&n) {
            return Err(shape_err("add_bias", format!("{:?} + bias {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?.checked("add_bias")?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, geom: Conv2dGeometry) -> Result<Var> {
        let dims = ConvDims::resolve(self.shape(x), self.shape(kernel), self.shape(bias), geom)?;
        let out = ops::conv2d_raw(&dims, self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let out = Tensor::new(vec![dims.ho, dims.wo, dims.cout], out)?.checked("conv2d")?;
        Ok(self.push(out, Op::Conv { x, k: kernel, b: bias, dims }, &[x, kernel, bias]))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let dims = ops::conv1d_dims(self.shape(x), self.shape(kernel), self.shape(bias), stride, padding)?;
        let out = ops::conv2d_raw(&dims, self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let out = Tensor::new(vec![dims.wo, dims.cout], out)?.checked("conv1d")?;
        Ok(self.push(out, Op::Conv { x, k: kernel, b: bias, dims }, &[x, kernel, bias]))
    }

    pub fn adaptive_max_pool_width(&mut self, x: Var, target_w: usize) -> Result<Var> {
        let (out, argmax) = ops::adaptive_max_pool_width(self.value(x), target_w)?;
        Ok(self.push(out, Op::PoolWidth { x, argmax }, &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::log_softmax(self.value(x))?;
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let lead = self.shape(*first).split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (last, l) = self.shape(p).split_last().expect("rank >= 1");
            if l != lead.as_slice() {
                return Err(shape_err("concat", format!("{:?} vs {:?}", self.shape(*first), self.shape(p))));
            }
            widths.push(*last);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("stack of nothing".into()))?;
        let inner = self.shape(*first).to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.value(*first).len());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(shape_err("stack", format!("{:?} vs {:?}", inner, self.shape(p))));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Stack(parts.to_vec()), parts))
    }

    /// Row `row` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if row >= m {
            return Err(shape_err("row", format!("row {row} of {m}")));
        }
        let out = Tensor::new(vec![n], self.value(x).data()[row * n..(row + 1) * n].to_vec())?;
        Ok(self.push(out, Op::Row { x, row }, &[x]))
    }

    /// Elements `start..start+len` of a vector.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 || len == 0 || start + len > xv.len() {
            return Err(shape_err("narrow", format!("{start}..{} of {:?}", start + len, xv.shape())));
        }
        let out = Tensor::new(vec![len], xv.data()[start..start + len].to_vec())?;
        Ok(self.push(out, Op::Narrow { x, start, len }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let out = Tensor::scalar(s).checked("sum")?;
        Ok(self.push(out, Op::Sum(x), &[x]))
    }

    /// Mean over the rows of a matrix, `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            for (o, &v) in out.iter_mut().zip(&self.value(x).data()[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::new(vec![n], out)?;
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    /// Mean over the width of a feature map, `[H×W×C] -> [H×C]`.
    pub fn mean_width(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3()?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); h * c];
        for r in 0..h {
            let o = &mut out[r * c..(r + 1) * c];
            for col in 0..w {
                for (oi, &v) in o.iter_mut().zip(&xd[(r * w + col) * c..][..c]) {
                    *oi += v;
                }
            }
        }
        let inv = T::one() / T::of(w as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::new(vec![h, c], out)?;
        Ok(self.push(out, Op::MeanWidth(x), &[x]))
    }

    /// Element `index` of a vector, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 || index >= xv.len() {
            return Err(shape_err("pick", format!("index {index} of {:?}", xv.shape())));
        }
        let out = Tensor::scalar(xv.data()[index]);
        Ok(self.push(out, Op::Pick { x, index }, &[x]))
    }

    /// Cross-entropy of `logits[n]` against class `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        let p = self.pick(lp, target)?;
        self.scale(p, -1.0)
    }

    /// CTC negative log-likelihood of `target` under `log_probs[T×(N+1)]`,
    /// blank being the last class. Infeasible targets are an error here; use
    /// [`crate::ctc::ctc_loss`] to get the flagged `+∞` form.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize]) -> Result<Var> {
        let res = ctc::ctc_loss(self.value(log_probs), target)?;
        if !res.feasible {
            return Err(res.infeasibility());
        }
        let out = Tensor::scalar(T::of(res.loss)).checked("ctc_loss")?;
        Ok(self.push(out, Op::Ctc { x: log_probs, grad: res.grad }, &[log_probs]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.differentiated {
            return Err(Error::StaleGraph);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient matches node shape")))
            .collect();
        Ok(Gradients { grads, params: self.params.clone(), shapes })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                f(slot);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, &g), &b) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * b;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, &g), &a) in s.iter_mut().zip(g).zip(av) {
                        *s += g * a;
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |s| {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(y) {
                    *s += g * (T::one() - y * y);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |s| {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(y) {
                    *s += g * y * (T::one() - y);
                }
            }),
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((s, &g), &v) in s.iter_mut().zip(g).zip(xv) {
                        if v > *lo && v < *hi {
                            *s += g;
                        }
                    }
                })
            }
            Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c)),
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2()?;
                let n = nodes[b.0].value.dims2()?.1;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| ops::gemm_grad_a(m, k, n, g, bv, s));
                acc(*b, &mut |s| ops::gemm_grad_b(m, k, n, av, g, s));
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                let n = nodes[b.0].value.len();
                acc(*b, &mut |s| {
                    for chunk in g.chunks(n) {
                        s.iter_mut().zip(chunk).for_each(|(s, &g)| *s += g);
                    }
                });
            }
            Op::Conv { x, k, b, dims } => {
                let need_x = nodes[x.0].needs_grad;
                let (gx, gk, gb) = ops::conv2d_backward_raw(dims, val(*x), val(*k), g, need_x);
                if let Some(gx) = gx {
                    acc(*x, &mut |s| s.iter_mut().zip(&gx).for_each(|(s, &g)| *s += g));
                }
                acc(*k, &mut |s| s.iter_mut().zip(&gk).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(&gb).for_each(|(s, &g)| *s += g));
            }
            Op::PoolWidth { x, argmax } => acc(*x, &mut |s| {
                for (&src, &g) in argmax.iter().zip(g) {
                    s[src] += g;
                }
            }),
            Op::Softmax(x) => {
                let n = *node.value.shape().last().expect("rank >= 1");
                acc(*x, &mut |s| {
                    for ((sc, gc), yc) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = gc.iter().zip(yc).map(|(&g, &y)| g * y).sum();
                        for ((s, &g), &y) in sc.iter_mut().zip(gc).zip(yc) {
                            *s += y * (g - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().expect("rank >= 1");
                acc(*x, &mut |s| {
                    for ((sc, gc), yc) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: T = gc.iter().copied().sum();
                        for ((s, &g), &y) in sc.iter_mut().zip(gc).zip(yc) {
                            *s += g - y.exp() * total;
                        }
                    }
                })
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)),
            Op::Concat(parts) => {
                let total = *node.value.shape().last().expect("rank >= 1");
                let rows = node.value.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = *nodes[p.0].value.shape().last().expect("rank >= 1");
                    acc(*p, &mut |s| {
                        for r in 0..rows {
                            for (s, &g) in s[r * w..(r + 1) * w].iter_mut().zip(&g[r * total + offset..]) {
                                *s += g;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Stack(parts) => {
                let n = nodes[parts[0].0].value.len();
                for (j, p) in parts.iter().enumerate() {
                    acc(*p, &mut |s| s.iter_mut().zip(&g[j * n..(j + 1) * n]).for_each(|(s, &g)| *s += g));
                }
            }
            Op::Row { x, row } => {
                let n = g.len();
                acc(*x, &mut |s| s[row * n..(row + 1) * n].iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::Narrow { x, start, len } => {
                acc(*x, &mut |s| s[*start..start + len].iter_mut().zip(g).for_each(|(s, &g)| *s += g))
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::MeanRows(x) => {
                let n = g.len();
                let m = nodes[x.0].value.len() / n;
                let inv = T::one() / T::of(m as f64);
                acc(*x, &mut |s| {
                    for chunk in s.chunks_mut(n) {
                        chunk.iter_mut().zip(g).for_each(|(s, &g)| *s += g * inv);
                    }
                })
            }
            Op::MeanWidth(x) => {
                let (h, w, c) = nodes[x.0].value.dims3()?;
                let inv = T::one() / T::of(w as f64);
                acc(*x, &mut |s| {
                    for r in 0..h {
                        for col in 0..w {
                            let dst = &mut s[(r * w + col) * c..][..c];
                            dst.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(s, &g)| *s += g * inv);
                        }
                    }
                })
            }
            Op::Pick { x, index } => acc(*x, &mut |s| s[*index] += g[0]),
            Op::Ctc { x, grad } => acc(*x, &mut |s| {
                s.iter_mut().zip(grad.data()).for_each(|(s, &d)| *s += g[0] * d);
            }),
        }
        Ok(())
    }
}
