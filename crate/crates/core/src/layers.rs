//! Parameterized layers and their multi-branch variants.
//!
//! Every layer comes in two forms: a parameter struct owning tensors
//! (`DenseParams`, `MultiConv1d`, ...) and a bound form holding graph
//! variables (`BoundDense`, ...) produced by `bind`. Forward functions take
//! the bound form so the same code serves training (trainable leaves) and
//! inference (constant leaves).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::Conv2dGeometry;
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named access to every parameter tensor of a structure.
///
/// `visit` and `visit_mut` walk tensors in the same order in which `bind`
/// registers them with a graph, so gradients returned by
/// [`Gradients::params`](crate::autodiff::Gradients::params) line up with
/// `visit_mut`.
pub trait Parameters<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t| out.push((name, t)));
        out
    }
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
fn glorot<T: Real, R: Rng>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng).expect("positive dims")
}

// ---------------------------------------------------------------------------
// Dense

/// `y = x·W + b` over the last axis of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    /// `[C_in × C_out]`
    pub weight: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> DenseParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (_, out) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(shape_err("dense", format!("weight {:?} with bias {:?}", weight.shape(), bias.shape())));
        }
        Ok(DenseParams { weight, bias })
    }

    pub fn init<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        DenseParams {
            weight: glorot(vec![c_in, c_out], c_in, c_out, rng),
            bias: Tensor::zeros(vec![c_out]).expect("positive dims"),
        }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        DenseParams { weight: Tensor::zeros(vec![c_in, c_out]).unwrap(), bias: Tensor::zeros(vec![c_out]).unwrap() }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundDense {
        BoundDense { weight: g.leaf(self.weight.clone(), trainable), bias: g.leaf(self.bias.clone(), trainable) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(x.clone());
        let y = dense(&mut g, &b, x)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Real> Parameters<T> for DenseParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Dense layer applied over the last axis of `x` (any rank).
pub fn dense<T: Real>(g: &mut Graph<T>, p: &BoundDense, x: Var) -> Result<Var> {
    let (c_in, c_out) = g.value(p.weight).dims2()?;
    let shape = g.shape(x).to_vec();
    if shape.last() != Some(&c_in) {
        return Err(shape_err("dense", format!("input {shape:?} for a {c_in}→{c_out} layer")));
    }
    let y = if shape.len() == 2 {
        g.matmul(x, p.weight)?
    } else {
        let rows = g.value(x).len() / c_in;
        let x2 = g.reshape(x, vec![rows, c_in])?;
        let y = g.matmul(x2, p.weight)?;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("rank >= 1") = c_out;
        g.reshape(y, out_shape)?
    };
    g.add_bias(y, p.bias)
}

/// `NSL` identically shaped dense layers sharing one input; outputs summed.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiDense<T> {
    sublayers: Vec<DenseParams<T>>,
}

impl<T: Real> MultiDense<T> {
    pub fn new(sublayers: Vec<DenseParams<T>>) -> Result<Self> {
        let first = sublayers.first().ok_or_else(|| Error::InvalidArgument("multi-dense needs NSL >= 1".into()))?;
        if let Some(bad) = sublayers.iter().find(|s| s.weight.shape() != first.weight.shape()) {
            return Err(shape_err(
                "multi_dense",
                format!("sublayer {:?} differs from {:?}", bad.weight.shape(), first.weight.shape()),
            ));
        }
        Ok(MultiDense { sublayers })
    }

    /// Each sublayer `s` draws from the stream `"{name}.{s}"`.
    pub fn init(c_in: usize, c_out: usize, nsl: usize, seed: u64, name: &str) -> Result<Self> {
        if nsl == 0 {
            return Err(Error::InvalidArgument("NSL must be at least 1".into()));
        }
        Self::new(
            (0..nsl).map(|s| DenseParams::init(c_in, c_out, &mut rng::stream(seed, &format!("{name}.{s}")))).collect(),
        )
    }

    pub fn single(p: DenseParams<T>) -> Self {
        MultiDense { sublayers: vec![p] }
    }

    pub fn nsl(&self) -> usize {
        self.sublayers.len()
    }

    pub fn sublayers(&self) -> &[DenseParams<T>] {
        &self.sublayers
    }

    pub fn sublayers_mut(&mut self) -> &mut [DenseParams<T>] {
        &mut self.sublayers
    }

    pub fn in_dim(&self) -> usize {
        self.sublayers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.sublayers[0].out_dim()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<BoundDense> {
        self.sublayers.iter().map(|s| s.bind(g, trainable)).collect()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(x.clone());
        let y = multi_dense(&mut g, &b, x)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Real> Parameters<T> for MultiDense<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (s, l) in self.sublayers.iter().enumerate() {
            l.visit(&join(prefix, &s.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (s, l) in self.sublayers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &s.to_string()), f);
        }
    }
}

/// `Σ_s (x·W⁽ˢ⁾ + b⁽ˢ⁾)`, summed left to right.
pub fn multi_dense<T: Real>(g: &mut Graph<T>, branches: &[BoundDense], x: Var) -> Result<Var> {
    let (first, rest) = branches.split_first().ok_or_else(|| Error::InvalidArgument("no branches".into()))?;
    let mut y = dense(g, first, x)?;
    for b in rest {
        let yb = dense(g, b, x)?;
        y = g.add(y, yb)?;
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Conv1d

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dParams<T> {
    /// `[C_out × C_in × k]`
    pub kernel: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConv1d {
    pub kernel: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv1dParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let &[c_out, _, _] = kernel.shape() else {
            return Err(shape_err("conv1d", format!("kernel {:?} must be Cout×Cin×k", kernel.shape())));
        };
        if bias.shape() != [c_out] || stride == 0 {
            return Err(shape_err(
                "conv1d",
                format!("kernel {:?}, bias {:?}, stride {stride}", kernel.shape(), bias.shape()),
            ));
        }
        Ok(Conv1dParams { kernel, bias, stride, padding })
    }

    pub fn init<R: Rng>(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut R) -> Self {
        Conv1dParams {
            kernel: glorot(vec![c_out, c_in, k], c_in * k, c_out * k, rng),
            bias: Tensor::zeros(vec![c_out]).expect("positive dims"),
            stride,
            padding,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundConv1d {
        BoundConv1d {
            kernel: g.leaf(self.kernel.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::ops::conv1d(x, &self.kernel, &self.bias, self.stride, self.padding)
    }

    fn same_config(&self, other: &Self) -> bool {
        self.kernel.shape() == other.kernel.shape() && self.stride == other.stride && self.padding == other.padding
    }
}

impl<T: Real> Parameters<T> for Conv1dParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "kernel"), &self.kernel);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "kernel"), &mut self.kernel);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub fn conv1d<T: Real>(g: &mut Graph<T>, p: &BoundConv1d, x: Var) -> Result<Var> {
    g.conv1d(x, p.kernel, p.bias, p.stride, p.padding)
}

/// `NSL` identically configured 1-D convolutions sharing one input; outputs summed.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiConv1d<T> {
    sublayers: Vec<Conv1dParams<T>>,
}

impl<T: Real> MultiConv1d<T> {
    pub fn new(sublayers: Vec<Conv1dParams<T>>) -> Result<Self> {
        let first = sublayers.first().ok_or_else(|| Error::InvalidArgument("multi-conv needs NSL >= 1".into()))?;
        if sublayers.iter().any(|s| !s.same_config(first)) {
            return Err(Error::ConfigMismatch("multi-conv sublayers differ in shape, stride or padding".into()));
        }
        Ok(MultiConv1d { sublayers })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        nsl: usize,
        seed: u64,
        name: &str,
    ) -> Result<Self> {
        if nsl == 0 {
            return Err(Error::InvalidArgument("NSL must be at least 1".into()));
        }
        Self::new(
            (0..nsl)
                .map(|s| {
                    Conv1dParams::init(c_in, c_out, k, stride, padding, &mut rng::stream(seed, &format!("{name}.{s}")))
                })
                .collect(),
        )
    }

    pub fn single(p: Conv1dParams<T>) -> Self {
        MultiConv1d { sublayers: vec![p] }
    }

    pub fn nsl(&self) -> usize {
        self.sublayers.len()
    }

    pub fn sublayers(&self) -> &[Conv1dParams<T>] {
        &self.sublayers
    }

    pub fn sublayers_mut(&mut self) -> &mut [Conv1dParams<T>] {
        &mut self.sublayers
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<BoundConv1d> {
        self.sublayers.iter().map(|s| s.bind(g, trainable)).collect()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(x.clone());
        let y = multi_conv1d(&mut g, &b, x)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Real> Parameters<T> for MultiConv1d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (s, l) in self.sublayers.iter().enumerate() {
            l.visit(&join(prefix, &s.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (s, l) in self.sublayers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &s.to_string()), f);
        }
    }
}

/// `Σ_s conv1d(x; K⁽ˢ⁾, b⁽ˢ⁾)`, summed left to right.
pub fn multi_conv1d<T: Real>(g: &mut Graph<T>, branches: &[BoundConv1d], x: Var) -> Result<Var> {
    let (first, rest) = branches.split_first().ok_or_else(|| Error::InvalidArgument("no branches".into()))?;
    let mut y = conv1d(g, first, x)?;
    for b in rest {
        let yb = conv1d(g, b, x)?;
        y = g.add(y, yb)?;
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// LSTM

/// Single-layer LSTM cell without peepholes.
///
/// Gate blocks along the `4·C_h` axis are ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    /// `[C_in × 4C_h]`
    pub w_input: Tensor<T>,
    /// `[C_h × 4C_h]`
    pub w_hidden: Tensor<T>,
    /// `[4C_h]`, forget block initialized to 1.
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl<T: Real> LstmParams<T> {
    pub fn init<R: Rng>(c_in: usize, c_h: usize, rng: &mut R) -> Self {
        let w_input = glorot(vec![c_in, 4 * c_h], c_in, c_h, rng);
        let w_hidden = glorot(vec![c_h, 4 * c_h], c_h, c_h, rng);
        let bias = Tensor::from_fn(vec![4 * c_h], |i| if (c_h..2 * c_h).contains(&i) { T::one() } else { T::zero() })
            .expect("positive dims");
        LstmParams { w_input, w_hidden, bias }
    }

    pub fn input_size(&self) -> usize {
        self.w_input.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundLstm {
        BoundLstm {
            w_input: g.leaf(self.w_input.clone(), trainable),
            w_hidden: g.leaf(self.w_hidden.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
            hidden: self.hidden_size(),
        }
    }
}

impl<T: Real> Parameters<T> for LstmParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "w_input"), &self.w_input);
        f(join(prefix, "w_hidden"), &self.w_hidden);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "w_input"), &mut self.w_input);
        f(join(prefix, "w_hidden"), &mut self.w_hidden);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Cell update from pre-activation input contribution `xw[4C_h]` (input
/// projection plus bias).
fn lstm_cell<T: Real>(g: &mut Graph<T>, p: &BoundLstm, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let ch = p.hidden;
    let h_row = g.reshape(h, vec![1, ch])?;
    let hw = g.matmul(h_row, p.w_hidden)?;
    let hw = g.reshape(hw, vec![4 * ch])?;
    let gates = g.add(xw, hw)?;
    let i = g.narrow(gates, 0, ch)?;
    let i = g.sigmoid(i)?;
    let f = g.narrow(gates, ch, ch)?;
    let f = g.sigmoid(f)?;
    let cand = g.narrow(gates, 2 * ch, ch)?;
    let cand = g.tanh(cand)?;
    let o = g.narrow(gates, 3 * ch, ch)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let squashed = g.tanh(c_new)?;
    let h_new = g.mul(o, squashed)?;
    Ok((h_new, c_new))
}

fn check_state<T: Real>(g: &Graph<T>, p: &BoundLstm, h: Var, c: Var) -> Result<()> {
    if g.shape(h) != [p.hidden] || g.shape(c) != [p.hidden] {
        return Err(shape_err("lstm", format!("state {:?}/{:?} for hidden size {}", g.shape(h), g.shape(c), p.hidden)));
    }
    Ok(())
}

/// One LSTM step on `x[C_in]` from state `(h, c)`; returns `(h', c')`.
pub fn lstm_step<T: Real>(g: &mut Graph<T>, p: &BoundLstm, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    check_state(g, p, h, c)?;
    let c_in = g.shape(p.w_input)[0];
    if g.shape(x) != [c_in] {
        return Err(shape_err("lstm_step", format!("input {:?} for input size {c_in}", g.shape(x))));
    }
    let x_row = g.reshape(x, vec![1, c_in])?;
    let xw = g.matmul(x_row, p.w_input)?;
    let xw = g.reshape(xw, vec![4 * p.hidden])?;
    let xw = g.add_bias(xw, p.bias)?;
    lstm_cell(g, p, xw, h, c)
}

/// Output of [`lstm_sequence`].
#[derive(Clone, Copy, Debug)]
pub struct LstmRun {
    /// `[T × C_h]`
    pub outputs: Var,
    pub h: Var,
    pub c: Var,
}

/// Runs the cell over the rows of `xs[T×C_in]`, starting from `(h, c)`.
pub fn lstm_sequence<T: Real>(g: &mut Graph<T>, p: &BoundLstm, xs: Var, h: Var, c: Var) -> Result<LstmRun> {
    check_state(g, p, h, c)?;
    let (steps, _) = g.value(xs).dims2()?;
    let xw = g.matmul(xs, p.w_input)?;
    let xw = g.add_bias(xw, p.bias)?;
    let (mut h, mut c) = (h, c);
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let row = g.row(xw, t)?;
        (h, c) = lstm_cell(g, p, row, h, c)?;
        outs.push(h);
    }
    let outputs = g.stack(&outs)?;
    Ok(LstmRun { outputs, h, c })
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderBlockConfig {
    pub out_channels: usize,
    /// `[kh, kw]`, odd; padding is `k / 2` on each side.
    pub kernel: [usize; 2],
    /// `[sh, sw]`
    pub stride: [usize; 2],
    pub activation: Activation,
}

/// Stack of strided conv2d blocks mapping `H×W×1` to `H/dh × W/dw × C_f`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub blocks: Vec<EncoderBlockConfig>,
}

impl EncoderConfig {
    fn block(out_channels: usize, k: usize, stride: [usize; 2]) -> EncoderBlockConfig {
        EncoderBlockConfig { out_channels, kernel: [k, k], stride, activation: Activation::Tanh }
    }

    /// Downsampling 8×4; three 3×3 blocks and a 1×1 projection to `c_f`.
    pub fn desk(c_f: usize) -> Self {
        EncoderConfig {
            in_channels: 1,
            blocks: vec![
                Self::block(8, 3, [2, 2]),
                Self::block(16, 3, [2, 2]),
                Self::block(32, 3, [2, 1]),
                Self::block(c_f, 1, [1, 1]),
            ],
        }
    }

    /// Downsampling 32×8 (a 480×800 input gives a 15×100 feature map).
    pub fn full(c_f: usize) -> Self {
        EncoderConfig {
            in_channels: 1,
            blocks: vec![
                Self::block(32, 3, [2, 2]),
                Self::block(64, 3, [2, 2]),
                Self::block(128, 3, [2, 2]),
                Self::block(128, 3, [2, 1]),
                Self::block(c_f, 3, [2, 1]),
            ],
        }
    }

    /// Total `(height, width)` downsampling factors.
    pub fn downsampling(&self) -> (usize, usize) {
        self.blocks.iter().fold((1, 1), |(h, w), b| (h * b.stride[0], w * b.stride[1]))
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.in_channels == 0 {
            return Err(Error::InvalidArgument("encoder needs at least one block and one input channel".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel.iter().any(|&k| k % 2 == 0) || b.stride.contains(&0) {
                return Err(Error::InvalidArgument(format!(
                    "encoder block {i}: {b:?} needs odd kernels and positive stride/channels"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    /// `[C_out × C_in × kh × kw]`
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: Conv2dGeometry,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    blocks: Vec<(Var, Var, Conv2dGeometry, Activation)>,
    down: (usize, usize),
}

impl<T: Real> EncoderParams<T> {
    pub fn init(cfg: &EncoderConfig, seed: u64, name: &str) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = cfg.in_channels;
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for (i, b) in cfg.blocks.iter().enumerate() {
            let [kh, kw] = b.kernel;
            let mut r = rng::stream(seed, &format!("{name}.{i}"));
            blocks.push(ConvBlock {
                kernel: glorot(vec![b.out_channels, c_in, kh, kw], c_in * kh * kw, b.out_channels * kh * kw, &mut r),
                bias: Tensor::zeros(vec![b.out_channels])?,
                geometry: Conv2dGeometry { stride: (b.stride[0], b.stride[1]), padding: (kh / 2, kw / 2) },
                activation: b.activation,
            });
            c_in = b.out_channels;
        }
        Ok(EncoderParams { blocks })
    }

    pub fn downsampling(&self) -> (usize, usize) {
        self.blocks.iter().fold((1, 1), |(h, w), b| (h * b.geometry.stride.0, w * b.geometry.stride.1))
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    (g.leaf(b.kernel.clone(), trainable), g.leaf(b.bias.clone(), trainable), b.geometry, b.activation)
                })
                .collect(),
            down: self.downsampling(),
        }
    }
}

impl<T: Real> Parameters<T> for EncoderParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &i.to_string());
            f(join(&p, "kernel"), &b.kernel);
            f(join(&p, "bias"), &b.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &i.to_string());
            f(join(&p, "kernel"), &mut b.kernel);
            f(join(&p, "bias"), &mut b.bias);
        }
    }
}

/// `image[H×W×C_in]` to feature map `[H/dh × W/dw × C_f]`.
pub fn encoder_forward<T: Real>(g: &mut Graph<T>, p: &BoundEncoder, image: Var) -> Result<Var> {
    let (h, w, _) = g.value(image).dims3()?;
    let (dh, dw) = p.down;
    if h % dh != 0 || w % dw != 0 {
        return Err(shape_err("encoder", format!("input {h}×{w} is not divisible by the downsampling {dh}×{dw}")));
    }
    let mut x = image;
    for &(k, b, geom, act) in &p.blocks {
        x = g.conv2d(x, k, b, geom)?;
        if act == Activation::Tanh {
            x = g.tanh(x)?;
        }
    }
    Ok(x)
}
