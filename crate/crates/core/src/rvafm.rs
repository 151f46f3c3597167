//! The re-parameterizing vertical attention module.
//!
//! At each step `t` the module scores every row of the feature map and
//! produces a line feature from the softmax-weighted rows:
//!
//! ```text
//! i_t = [α_{t-1} | clamp(c_t, 0, 1)]                  H_f × 2
//! j_t = F(i_t)                                        H_f × C_j
//! s_t = tanh(D_f(f′) + D_j(j_t) + D_h(h_{t-1}))       H_f × C_u
//! α_t = softmax(D_a(s_t))                             H_f
//! l_t = Σ_i α_{t,i} · mean_w f[i, w, :]               C_f
//! ```
//!
//! `F`, `D_h`, `D_f`, `D_j` and `D_a` are multi-branch layers in training
//! mode and single layers after fusion. `h_t` comes from the decoder, which
//! is abstracted as a [`DecoderHook`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{
    conv1d, dense, join, multi_conv1d, multi_dense, BoundConv1d, BoundDense, DenseParams, MultiConv1d, MultiDense,
    Parameters,
};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TrainMultibranch,
    InferenceFused,
}

/// Which of the five re-parameterizable layers carry `NSL` branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualLayers {
    pub f: bool,
    pub d_h: bool,
    pub d_f: bool,
    pub d_j: bool,
    pub d_a: bool,
}

impl DualLayers {
    pub const ALL: DualLayers = DualLayers { f: true, d_h: true, d_f: true, d_j: true, d_a: true };
    pub const NONE: DualLayers = DualLayers { f: false, d_h: false, d_f: false, d_j: false, d_a: false };

    pub fn from_ablation(a: Ablation) -> Self {
        let mut d = DualLayers::NONE;
        match a {
            Ablation::None => d = DualLayers::ALL,
            Ablation::Dh => d.d_h = true,
            Ablation::Df => d.d_f = true,
            Ablation::Dj => d.d_j = true,
            Ablation::Da => d.d_a = true,
            Ablation::F => d.f = true,
            Ablation::AllDense => {
                d = DualLayers::ALL;
                d.f = false;
            }
        }
        d
    }
}

impl Default for DualLayers {
    fn default() -> Self {
        DualLayers::ALL
    }
}

/// Ablation variants: a single multi-branch layer, or all dense layers.
/// `None` keeps all five layers multi-branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    Dh,
    Df,
    Dj,
    Da,
    F,
    AllDense,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Ablation::None,
            "dh" => Ablation::Dh,
            "df" => Ablation::Df,
            "dj" => Ablation::Dj,
            "da" => Ablation::Da,
            "f" => Ablation::F,
            "all-dense" => Ablation::AllDense,
            other => return Err(Error::InvalidArgument(format!("unknown ablation {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RvafmConfig {
    pub c_f: usize,
    pub c_j: usize,
    pub kernel_size: usize,
    pub collapse_width: usize,
    pub c_u: usize,
    pub c_h: usize,
    pub nsl: usize,
    pub max_steps: usize,
    pub dual: DualLayers,
    pub mode: Mode,
}

impl RvafmConfig {
    pub fn desk() -> Self {
        RvafmConfig {
            c_f: 64,
            c_j: 16,
            kernel_size: 15,
            collapse_width: 16,
            c_u: 64,
            c_h: 64,
            nsl: 2,
            max_steps: 6,
            dual: DualLayers::ALL,
            mode: Mode::TrainMultibranch,
        }
    }

    pub fn full() -> Self {
        RvafmConfig { c_f: 256, c_u: 256, c_h: 256, collapse_width: 100, max_steps: 30, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.c_f, self.c_j, self.c_u, self.c_h, self.collapse_width, self.nsl, self.max_steps];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("attention dimensions must be positive: {self:?}")));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        Ok(())
    }

    /// Branch count actually instantiated for a layer with the given dual flag.
    pub fn nsl_for(&self, dual: bool) -> usize {
        if dual && self.mode == Mode::TrainMultibranch {
            self.nsl
        } else {
            1
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    /// Same configuration in the other mode, for comparing multi and fused.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }
}

/// All attention-module weights, in training or fused form.
#[derive(Clone, Debug, PartialEq)]
pub struct RvafmParams<T> {
    pub config: RvafmConfig,
    /// `2 → C_j`, kernel `k`, padding `k/2`.
    pub conv: MultiConv1d<T>,
    /// `C_h → C_u`
    pub d_h: MultiDense<T>,
    /// `C_f → C_u`
    pub d_f: MultiDense<T>,
    /// `C_j → C_u`
    pub d_j: MultiDense<T>,
    /// `C_u → 1`
    pub d_a: MultiDense<T>,
    /// `collapse_width·C_f → C_f`, per row.
    pub collapse: DenseParams<T>,
    /// `C_u + C_h → 2` (continue, stop).
    pub halt: DenseParams<T>,
}

impl<T: Real> RvafmParams<T> {
    /// Initializes every tensor from a stream named after it, so models that
    /// differ only in `NSL` share all single-branch weights and branch 0.
    pub fn init(config: RvafmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.dual;
        Ok(RvafmParams {
            conv: MultiConv1d::init(2, c.c_j, c.kernel_size, 1, c.padding(), c.nsl_for(d.f), seed, "rvafm.f")?,
            d_h: MultiDense::init(c.c_h, c.c_u, c.nsl_for(d.d_h), seed, "rvafm.d_h")?,
            d_f: MultiDense::init(c.c_f, c.c_u, c.nsl_for(d.d_f), seed, "rvafm.d_f")?,
            d_j: MultiDense::init(c.c_j, c.c_u, c.nsl_for(d.d_j), seed, "rvafm.d_j")?,
            d_a: MultiDense::init(c.c_u, 1, c.nsl_for(d.d_a), seed, "rvafm.d_a")?,
            collapse: DenseParams::init(c.collapse_width * c.c_f, c.c_f, &mut rng::stream(seed, "rvafm.collapse")),
            halt: DenseParams::init(c.c_u + c.c_h, 2, &mut rng::stream(seed, "rvafm.halt")),
            config,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Parameters of the five re-parameterizable layers.
    pub fn fusable_param_count(&self) -> usize {
        self.conv.param_count()
            + self.d_h.param_count()
            + self.d_f.param_count()
            + self.d_j.param_count()
            + self.d_a.param_count()
    }

    /// Checks that every layer has the shape and branch count implied by the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.dual;
        let check = |what: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::ConfigMismatch(format!("{what} does not match the attention config {c:?}")))
            }
        };
        let dense_ok = |m: &MultiDense<T>, i: usize, o: usize, dual: bool| {
            m.nsl() == c.nsl_for(dual) && m.in_dim() == i && m.out_dim() == o
        };
        let conv0 = &self.conv.sublayers()[0];
        check(
            "F",
            self.conv.nsl() == c.nsl_for(d.f)
                && conv0.kernel.shape() == [c.c_j, 2, c.kernel_size]
                && conv0.padding == c.padding()
                && conv0.stride == 1,
        )?;
        check("D_h", dense_ok(&self.d_h, c.c_h, c.c_u, d.d_h))?;
        check("D_f", dense_ok(&self.d_f, c.c_f, c.c_u, d.d_f))?;
        check("D_j", dense_ok(&self.d_j, c.c_j, c.c_u, d.d_j))?;
        check("D_a", dense_ok(&self.d_a, c.c_u, 1, d.d_a))?;
        check("collapse", self.collapse.in_dim() == c.collapse_width * c.c_f && self.collapse.out_dim() == c.c_f)?;
        check("halt", self.halt.in_dim() == c.c_u + c.c_h && self.halt.out_dim() == 2)
    }

    /// The same weights in another precision.
    pub fn cast<U: Real>(&self) -> Result<RvafmParams<U>> {
        let mut out = RvafmParams::<U>::init(self.config, 0)?;
        let mut src = Vec::new();
        self.visit("", &mut |_, t| src.push(t));
        let mut i = 0;
        out.visit_mut("", &mut |_, t| {
            *t = src[i].cast();
            i += 1;
        });
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundRvafm {
        BoundRvafm {
            config: self.config,
            conv: self.conv.bind(g, trainable),
            d_h: self.d_h.bind(g, trainable),
            d_f: self.d_f.bind(g, trainable),
            d_j: self.d_j.bind(g, trainable),
            d_a: self.d_a.bind(g, trainable),
            collapse: self.collapse.bind(g, trainable),
            halt: self.halt.bind(g, trainable),
        }
    }
}

impl<T: Real> Parameters<T> for RvafmParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.conv.visit(&join(prefix, "f"), f);
        self.d_h.visit(&join(prefix, "d_h"), f);
        self.d_f.visit(&join(prefix, "d_f"), f);
        self.d_j.visit(&join(prefix, "d_j"), f);
        self.d_a.visit(&join(prefix, "d_a"), f);
        self.collapse.visit(&join(prefix, "collapse"), f);
        self.halt.visit(&join(prefix, "halt"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv.visit_mut(&join(prefix, "f"), f);
        self.d_h.visit_mut(&join(prefix, "d_h"), f);
        self.d_f.visit_mut(&join(prefix, "d_f"), f);
        self.d_j.visit_mut(&join(prefix, "d_j"), f);
        self.d_a.visit_mut(&join(prefix, "d_a"), f);
        self.collapse.visit_mut(&join(prefix, "collapse"), f);
        self.halt.visit_mut(&join(prefix, "halt"), f);
    }
}

/// [`RvafmParams`] registered with a graph.
#[derive(Clone, Debug)]
pub struct BoundRvafm {
    pub config: RvafmConfig,
    pub conv: Vec<BoundConv1d>,
    pub d_h: Vec<BoundDense>,
    pub d_f: Vec<BoundDense>,
    pub d_j: Vec<BoundDense>,
    pub d_a: Vec<BoundDense>,
    pub collapse: BoundDense,
    pub halt: BoundDense,
}

fn apply_conv<T: Real>(g: &mut Graph<T>, branches: &[BoundConv1d], x: Var) -> Result<Var> {
    match branches {
        [single] => conv1d(g, single, x),
        _ => multi_conv1d(g, branches, x),
    }
}

fn apply_dense<T: Real>(g: &mut Graph<T>, branches: &[BoundDense], x: Var) -> Result<Var> {
    match branches {
        [single] => dense(g, single, x),
        _ => multi_dense(g, branches, x),
    }
}

/// `f[H_f×W_f×C_f]` → `f′[H_f×C_f]`: width pooled to `collapse_width`, then
/// each row's `collapse_width·C_f` values folded to `C_f` by a dense layer.
pub fn collapse_features<T: Real>(g: &mut Graph<T>, p: &BoundRvafm, f: Var) -> Result<Var> {
    let (h, w, c) = g.value(f).dims3()?;
    let cw = p.config.collapse_width;
    if c != p.config.c_f {
        return Err(shape_err("collapse_features", format!("{c} channels, config expects {}", p.config.c_f)));
    }
    if w < cw {
        return Err(shape_err("collapse_features", format!("feature width {w} is below the collapse width {cw}")));
    }
    let pooled = g.adaptive_max_pool_width(f, cw)?;
    let flat = g.reshape(pooled, vec![h, cw * c])?;
    dense(g, &p.collapse, flat)
}

/// Per-image quantities shared by every step of a rollout.
#[derive(Clone, Copy, Debug)]
pub struct RolloutContext {
    /// `[H_f×W_f×C_f]`
    pub f: Var,
    /// `[H_f×C_f]`
    pub f_prime: Var,
    /// Width-averaged rows, `[H_f×C_f]`.
    pub rows: Var,
    /// `D_f(f′)`, `[H_f×C_u]`.
    pub f_proj: Var,
    pub rows_count: usize,
}

impl RolloutContext {
    pub fn new<T: Real>(g: &mut Graph<T>, p: &BoundRvafm, f: Var) -> Result<Self> {
        let f_prime = collapse_features(g, p, f)?;
        let rows = g.mean_width(f)?;
        let f_proj = apply_dense(g, &p.d_f, f_prime)?;
        let rows_count = g.shape(f)[0];
        Ok(RolloutContext { f, f_prime, rows, f_proj, rows_count })
    }
}

/// Recurrent state entering step `t`.
#[derive(Clone, Copy, Debug)]
pub struct RvafmState {
    /// `α_{t-1}`, `[H_f]`.
    pub alpha_prev: Var,
    /// `c_t = Σ_{τ<t} α_τ`, `[H_f]`.
    pub coverage: Var,
    /// `h_{t-1}`, `[C_h]`.
    pub h_prev: Var,
    pub t: usize,
}

impl RvafmState {
    /// All-zero state at `t = 0`.
    pub fn initial<T: Real>(g: &mut Graph<T>, rows: usize, c_h: usize) -> Result<Self> {
        let alpha_prev = g.constant(Tensor::zeros(vec![rows])?);
        let coverage = g.constant(Tensor::zeros(vec![rows])?);
        let h_prev = g.constant(Tensor::zeros(vec![c_h])?);
        Ok(RvafmState { alpha_prev, coverage, h_prev, t: 0 })
    }

    /// State after a step that attended with `alpha` and left the decoder at `h`.
    pub fn advance<T: Real>(self, g: &mut Graph<T>, alpha: Var, h: Var) -> Result<Self> {
        let coverage = g.add(self.coverage, alpha)?;
        Ok(RvafmState { alpha_prev: alpha, coverage, h_prev: h, t: self.t + 1 })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[C_f]`
    pub l: Var,
    /// `[H_f]`
    pub alpha: Var,
    /// `[H_f×C_u]`
    pub s: Var,
}

pub fn attention_step<T: Real>(
    g: &mut Graph<T>,
    p: &BoundRvafm,
    ctx: &RolloutContext,
    state: &RvafmState,
) -> Result<StepOutput> {
    if state.t >= p.config.max_steps {
        return Err(Error::StepBudgetExhausted(p.config.max_steps));
    }
    let h = ctx.rows_count;
    let cov = g.clamp(state.coverage, 0.0, 1.0)?;
    let a_col = g.reshape(state.alpha_prev, vec![h, 1])?;
    let c_col = g.reshape(cov, vec![h, 1])?;
    let i_t = g.concat(&[a_col, c_col])?;
    let j_t = apply_conv(g, &p.conv, i_t)?;
    let dj = apply_dense(g, &p.d_j, j_t)?;
    let dh = apply_dense(g, &p.d_h, state.h_prev)?;
    let pre = g.add(ctx.f_proj, dj)?;
    let pre = g.add_bias(pre, dh)?;
    let s = g.tanh(pre)?;
    let e = apply_dense(g, &p.d_a, s)?;
    let e = g.reshape(e, vec![h])?;
    let alpha = g.softmax(e)?;
    let a_row = g.reshape(alpha, vec![1, h])?;
    let l = g.matmul(a_row, ctx.rows)?;
    let l = g.reshape(l, vec![p.config.c_f])?;
    Ok(StepOutput { l, alpha, s })
}

/// End-of-paragraph logits `[continue, stop]` from the row-mean of `s_t` and `h_t`.
pub fn halt_predict<T: Real>(g: &mut Graph<T>, p: &BoundRvafm, s: Var, h: Var) -> Result<Var> {
    let s_mean = g.mean_rows(s)?;
    let x = g.concat(&[s_mean, h])?;
    dense(g, &p.halt, x)
}

pub const CONTINUE: usize = 0;
pub const STOP: usize = 1;

/// `true` when the logits favour stopping; a tie continues.
pub fn halt_decision<T: Real>(logits: &Tensor<T>) -> bool {
    logits.argmax() == STOP
}

/// The decoder side of the recurrence: consumes one step's attention and
/// returns the new hidden state `h_t`.
pub trait DecoderHook<T: Real> {
    /// Called once per rollout before the first step.
    fn begin(&mut self, _g: &mut Graph<T>, _ctx: &RolloutContext) -> Result<()> {
        Ok(())
    }

    fn step(&mut self, g: &mut Graph<T>, ctx: &RolloutContext, out: &StepOutput, h_prev: Var) -> Result<Var>;
}

/// `h_t = tanh(l_t·P + h_{t-1}·Q)`: a fixed random decoder used to exercise
/// the recurrence without a trained LSTM.
#[derive(Clone, Debug)]
pub struct ProjectionHook<T> {
    /// `[C_f×C_h]`
    pub p: Tensor<T>,
    /// `[C_h×C_h]`
    pub q: Tensor<T>,
    bound: Option<(Var, Var)>,
}

impl<T: Real> ProjectionHook<T> {
    pub fn new(p: Tensor<T>, q: Tensor<T>) -> Self {
        ProjectionHook { p, q, bound: None }
    }

    pub fn random<R: Rng>(c_f: usize, c_h: usize, rng: &mut R) -> Result<Self> {
        let a = (6.0 / (c_f + c_h) as f64).sqrt();
        let b = (3.0 / c_h as f64).sqrt();
        Ok(Self::new(Tensor::uniform(vec![c_f, c_h], -a, a, rng)?, Tensor::uniform(vec![c_h, c_h], -b, b, rng)?))
    }
}

impl<T: Real> DecoderHook<T> for ProjectionHook<T> {
    fn begin(&mut self, g: &mut Graph<T>, _ctx: &RolloutContext) -> Result<()> {
        self.bound = Some((g.constant(self.p.clone()), g.constant(self.q.clone())));
        Ok(())
    }

    fn step(&mut self, g: &mut Graph<T>, _ctx: &RolloutContext, out: &StepOutput, h_prev: Var) -> Result<Var> {
        let (p, q) = self.bound.ok_or_else(|| Error::InvalidArgument("decoder hook used before begin".into()))?;
        let c_f = g.shape(out.l)[0];
        let c_h = g.shape(h_prev)[0];
        let l = g.reshape(out.l, vec![1, c_f])?;
        let h = g.reshape(h_prev, vec![1, c_h])?;
        let a = g.matmul(l, p)?;
        let b = g.matmul(h, q)?;
        let z = g.add(a, b)?;
        let z = g.reshape(z, vec![c_h])?;
        g.tanh(z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutLength {
    /// Exactly this many steps, whatever the halt head says.
    Forced(usize),
    /// Until the halt head says stop, or `max_steps`.
    Predicted,
}

/// Graph handles of one rollout.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub context: RolloutContext,
    pub lines: Vec<Var>,
    pub alphas: Vec<Var>,
    pub coverages: Vec<Var>,
    pub halts: Vec<Var>,
    pub hidden: Vec<Var>,
    /// First step (1-based) whose halt logits say stop.
    pub predicted_halt: Option<usize>,
    /// `true` when a predicted-length rollout hit `max_steps` without stopping.
    pub exhausted: bool,
}

impl Rollout {
    pub fn steps(&self) -> usize {
        self.lines.len()
    }

    pub fn trace<T: Real>(&self, g: &Graph<T>) -> RolloutTrace<T> {
        let vals = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect();
        RolloutTrace {
            lines: vals(&self.lines),
            alphas: vals(&self.alphas),
            coverages: vals(&self.coverages),
            halts: vals(&self.halts),
            predicted_halt: self.predicted_halt,
            exhausted: self.exhausted,
        }
    }
}

/// Tensor values of one rollout.
#[derive(Clone, Debug)]
pub struct RolloutTrace<T> {
    pub lines: Vec<Tensor<T>>,
    pub alphas: Vec<Tensor<T>>,
    /// Coverage after each step, `c_{t+1}`.
    pub coverages: Vec<Tensor<T>>,
    pub halts: Vec<Tensor<T>>,
    pub predicted_halt: Option<usize>,
    pub exhausted: bool,
}

/// Runs the attention recurrence over the feature map `f` from the zero state.
pub fn run_rollout<T: Real, H: DecoderHook<T>>(
    g: &mut Graph<T>,
    p: &BoundRvafm,
    f: Var,
    hook: &mut H,
    length: RolloutLength,
) -> Result<Rollout> {
    let max = p.config.max_steps;
    let steps = match length {
        RolloutLength::Forced(0) => return Err(Error::InvalidArgument("a rollout needs at least one step".into())),
        RolloutLength::Forced(n) if n > max => return Err(Error::StepBudgetExhausted(max)),
        RolloutLength::Forced(n) => n,
        RolloutLength::Predicted => max,
    };
    let context = RolloutContext::new(g, p, f)?;
    hook.begin(g, &context)?;
    let mut state = RvafmState::initial(g, context.rows_count, p.config.c_h)?;
    let mut r = Rollout {
        context,
        lines: Vec::new(),
        alphas: Vec::new(),
        coverages: Vec::new(),
        halts: Vec::new(),
        hidden: Vec::new(),
        predicted_halt: None,
        exhausted: false,
    };
    for t in 1..=steps {
        let out = attention_step(g, p, &context, &state)?;
        let h = hook.step(g, &context, &out, state.h_prev)?;
        let d = halt_predict(g, p, out.s, h)?;
        state = state.advance(g, out.alpha, h)?;
        r.lines.push(out.l);
        r.alphas.push(out.alpha);
        r.coverages.push(state.coverage);
        r.halts.push(d);
        r.hidden.push(h);
        let stop = halt_decision(g.value(d));
        if stop && r.predicted_halt.is_none() {
            r.predicted_halt = Some(t);
        }
        if stop && length == RolloutLength::Predicted {
            break;
        }
    }
    r.exhausted = length == RolloutLength::Predicted && r.predicted_halt.is_none();
    Ok(r)
}

/// Inference-only rollout with constant weights.
pub fn rollout_values<T: Real, H: DecoderHook<T>>(
    p: &RvafmParams<T>,
    f: &Tensor<T>,
    hook: &mut H,
    length: RolloutLength,
) -> Result<RolloutTrace<T>> {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let fv = g.constant(f.clone());
    let r = run_rollout(&mut g, &b, fv, hook, length)?;
    Ok(r.trace(&g))
}
