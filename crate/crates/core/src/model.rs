//! The full recognizer: encoder, attention module and line decoder.
//!
//! The decoder reads one line per attention step. Line `t` is the
//! attention-weighted sum of feature-map rows, kept at full width:
//! `line_t[w] = Σ_i α_{t,i} f[i, w, :]`. An LSTM runs over the `W_f` columns
//! (its state carried from line to line), and a 1×1 convolution maps each
//! column to `N + 1` log-probabilities for CTC.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::ctc::{greedy_decode, Alphabet, LabelSeq};
use crate::error::{Error, Result};
use crate::fusion::fuse_rvafm;
use crate::layers::{
    conv1d, encoder_forward, join, lstm_sequence, BoundConv1d, BoundEncoder, BoundLstm, Conv1dParams, EncoderConfig,
    EncoderParams, LstmParams, Parameters,
};
use crate::real::Real;
use crate::rng;
use crate::rvafm::{
    run_rollout, BoundRvafm, DecoderHook, Mode, Rollout, RolloutContext, RolloutLength, RolloutTrace, RvafmConfig,
    RvafmParams, StepOutput, CONTINUE, STOP,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub rvafm: RvafmConfig,
    pub alphabet: Alphabet,
}

impl ModelConfig {
    pub fn desk(alphabet: Alphabet) -> Self {
        let rvafm = RvafmConfig::desk();
        ModelConfig { encoder: EncoderConfig::desk(rvafm.c_f), rvafm, alphabet }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.rvafm.validate()?;
        if self.encoder.out_channels() != self.rvafm.c_f {
            return Err(Error::ConfigMismatch(format!(
                "encoder produces {} channels, attention expects C_f = {}",
                self.encoder.out_channels(),
                self.rvafm.c_f
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder_config: EncoderConfig,
    pub alphabet: Alphabet,
    pub encoder: EncoderParams<T>,
    pub rvafm: RvafmParams<T>,
    /// `C_f → C_h`
    pub lstm: LstmParams<T>,
    /// `C_h → N + 1`, kernel 1.
    pub proj: Conv1dParams<T>,
}

/// Parameter counts per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub encoder: usize,
    pub attention: usize,
    /// The five re-parameterizable attention layers.
    pub fusable: usize,
    pub decoder: usize,
}

impl<T: Real> ModelParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let r = &config.rvafm;
        Ok(ModelParams {
            encoder_config: config.encoder.clone(),
            alphabet: config.alphabet.clone(),
            encoder: EncoderParams::init(&config.encoder, seed, "encoder")?,
            rvafm: RvafmParams::init(*r, seed)?,
            lstm: LstmParams::init(r.c_f, r.c_h, &mut rng::stream(seed, "decoder.lstm")),
            proj: Conv1dParams::init(
                r.c_h,
                config.alphabet.num_classes(),
                1,
                1,
                0,
                &mut rng::stream(seed, "decoder.proj"),
            ),
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder_config.clone(), rvafm: self.rvafm.config, alphabet: self.alphabet.clone() }
    }

    pub fn mode(&self) -> Mode {
        self.rvafm.mode()
    }

    /// `(down_h, down_w)` of the encoder; preprocessed images must be multiples.
    pub fn downsampling(&self) -> (usize, usize) {
        self.encoder.downsampling()
    }

    pub fn counts(&self) -> ParamCounts {
        let encoder = self.encoder.param_count();
        let attention = self.rvafm.param_count();
        let decoder = self.lstm.param_count() + self.proj.param_count();
        ParamCounts {
            total: encoder + attention + decoder,
            encoder,
            attention,
            fusable: self.rvafm.fusable_param_count(),
            decoder,
        }
    }

    /// Copy with the attention module fused; everything else is shared as is.
    pub fn fused(&self) -> Result<Self> {
        Ok(ModelParams { rvafm: fuse_rvafm(&self.rvafm)?, ..self.clone() })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(g, trainable),
            rvafm: self.rvafm.bind(g, trainable),
            lstm: self.lstm.bind(g, trainable),
            proj: self.proj.bind(g, trainable),
        }
    }

    /// Runs the model with constant weights on a preprocessed image.
    pub fn infer(&self, image: &Tensor<T>, length: RolloutLength) -> Result<Inference<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = forward_paragraph(&mut g, &b, x, length)?;
        Ok(Inference {
            log_probs: out.log_probs.iter().map(|&v| g.value(v).clone()).collect(),
            rollout: out.rollout.trace(&g),
        })
    }

    /// Greedy transcription with the halt head deciding the line count.
    pub fn recognize(&self, image: &Tensor<T>) -> Result<Recognition> {
        let inf = self.infer(image, RolloutLength::Predicted)?;
        let lines = inf.log_probs.iter().map(|lp| greedy_decode(lp, &self.alphabet)).collect::<Result<Vec<_>>>()?;
        Ok(Recognition { lines, exhausted: inf.rollout.exhausted })
    }
}

impl<T: Real> Parameters<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.rvafm.visit(&join(prefix, "rvafm"), f);
        self.lstm.visit(&join(prefix, "decoder.lstm"), f);
        self.proj.visit(&join(prefix, "decoder.proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.rvafm.visit_mut(&join(prefix, "rvafm"), f);
        self.lstm.visit_mut(&join(prefix, "decoder.lstm"), f);
        self.proj.visit_mut(&join(prefix, "decoder.proj"), f);
    }
}

/// [`ModelParams`] registered with a graph, in [`Parameters::visit`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub rvafm: BoundRvafm,
    pub lstm: BoundLstm,
    pub proj: BoundConv1d,
}

/// Decoder closing the attention loop; collects per-line log-probabilities.
struct LineDecoder {
    lstm: BoundLstm,
    proj: BoundConv1d,
    f_flat: Option<Var>,
    cell: Option<Var>,
    log_probs: Vec<Var>,
}

impl<T: Real> DecoderHook<T> for LineDecoder {
    fn begin(&mut self, g: &mut Graph<T>, ctx: &RolloutContext) -> Result<()> {
        let (h, w, c) = g.value(ctx.f).dims3()?;
        self.f_flat = Some(g.reshape(ctx.f, vec![h, w * c])?);
        self.cell = Some(g.constant(Tensor::zeros(vec![self.lstm.hidden])?));
        Ok(())
    }

    fn step(&mut self, g: &mut Graph<T>, ctx: &RolloutContext, out: &StepOutput, h_prev: Var) -> Result<Var> {
        let (f_flat, cell) =
            self.f_flat.zip(self.cell).ok_or_else(|| Error::InvalidArgument("decoder used before begin".into()))?;
        let (h, w, c) = g.value(ctx.f).dims3()?;
        let a_row = g.reshape(out.alpha, vec![1, h])?;
        let line = g.matmul(a_row, f_flat)?;
        let line = g.reshape(line, vec![w, c])?;
        let run = lstm_sequence(g, &self.lstm, line, h_prev, cell)?;
        let logits = conv1d(g, &self.proj, run.outputs)?;
        self.log_probs.push(g.log_softmax(logits)?);
        self.cell = Some(run.c);
        Ok(run.h)
    }
}

/// Graph handles of one paragraph forward pass.
#[derive(Clone, Debug)]
pub struct ParagraphOutput {
    /// `[W_f×(N+1)]` per line.
    pub log_probs: Vec<Var>,
    pub rollout: Rollout,
}

pub fn forward_paragraph<T: Real>(
    g: &mut Graph<T>,
    m: &BoundModel,
    image: Var,
    length: RolloutLength,
) -> Result<ParagraphOutput> {
    let f = encoder_forward(g, &m.encoder, image)?;
    let mut dec = LineDecoder { lstm: m.lstm, proj: m.proj, f_flat: None, cell: None, log_probs: Vec::new() };
    let rollout = run_rollout(g, &m.rvafm, f, &mut dec, length)?;
    Ok(ParagraphOutput { log_probs: dec.log_probs, rollout })
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ctc: f64,
    pub halt: f64,
}

/// `Σ_lines CTC + halt_weight · Σ_steps CE(halt)`, with the rollout forced
/// to the ground-truth line count; the halt label is stop on the last line
/// only.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    m: &BoundModel,
    image: Var,
    lines: &[LabelSeq],
    halt_weight: f64,
) -> Result<LossParts> {
    let out = forward_paragraph(g, m, image, RolloutLength::Forced(lines.len()))?;
    let mut terms = Vec::with_capacity(lines.len());
    for (lp, target) in out.log_probs.iter().zip(lines) {
        terms.push(g.ctc_loss(*lp, target.as_slice())?);
    }
    let mut total = sum_scalars(g, &terms)?;
    let ctc = g.value(total).item()?.as_f64();
    let mut halt = 0.0;
    if halt_weight != 0.0 {
        let mut ce = Vec::with_capacity(lines.len());
        for (t, &d) in out.rollout.halts.iter().enumerate() {
            let label = if t + 1 == lines.len() { STOP } else { CONTINUE };
            ce.push(g.cross_entropy(d, label)?);
        }
        let h = sum_scalars(g, &ce)?;
        halt = g.value(h).item()?.as_f64();
        let weighted = g.scale(h, halt_weight)?;
        total = g.add(total, weighted)?;
    }
    Ok(LossParts { total, ctc, halt })
}

fn sum_scalars<T: Real>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    let (first, rest) = xs.split_first().ok_or_else(|| Error::InvalidArgument("no loss terms".into()))?;
    rest.iter().try_fold(*first, |acc, &x| g.add(acc, x))
}

#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub log_probs: Vec<Tensor<T>>,
    pub rollout: RolloutTrace<T>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recognition {
    pub lines: Vec<String>,
    /// The halt head never said stop within `max_steps`.
    pub exhausted: bool,
}

impl Recognition {
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, EncoderBlockConfig};

    fn tiny() -> ModelConfig {
        let alphabet = Alphabet::new("ab".chars()).unwrap();
        let rvafm = RvafmConfig {
            c_f: 3,
            c_j: 2,
            kernel_size: 3,
            collapse_width: 2,
            c_u: 3,
            c_h: 3,
            nsl: 2,
            max_steps: 3,
            ..RvafmConfig::desk()
        };
        let encoder = EncoderConfig {
            in_channels: 1,
            blocks: vec![EncoderBlockConfig {
                out_channels: 3,
                kernel: [3, 3],
                stride: [2, 2],
                activation: Activation::Tanh,
            }],
        };
        ModelConfig { encoder, rvafm, alphabet }
    }

    #[test]
    fn class_dimension_and_forced_lines() {
        let m = ModelParams::<f64>::init(&tiny(), 0).unwrap();
        let img = Tensor::uniform(vec![8, 12, 1], 0.0, 1.0, &mut rng::stream(0, "img")).unwrap();
        let inf = m.infer(&img, RolloutLength::Forced(1)).unwrap();
        assert_eq!(inf.log_probs.len(), 1);
        assert_eq!(inf.log_probs[0].shape(), &[6, 3]);
    }

    #[test]
    fn zero_halt_weight_is_pure_ctc() {
        let m = ModelParams::<f64>::init(&tiny(), 1).unwrap();
        let img = Tensor::uniform(vec![8, 12, 1], 0.0, 1.0, &mut rng::stream(1, "img")).unwrap();
        let lines = [LabelSeq(vec![0, 1]), LabelSeq(vec![1])];
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let x = g.constant(img.clone());
        let lp = total_loss(&mut g, &b, x, &lines, 0.0).unwrap();
        assert_eq!(g.value(lp.total).item().unwrap(), lp.ctc);
        assert_eq!(lp.halt, 0.0);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let x = g.constant(img);
        let with_halt = total_loss(&mut g, &b, x, &lines, 1.0).unwrap();
        assert!((with_halt.ctc - lp.ctc).abs() == 0.0 && with_halt.halt > 0.0);
    }

    #[test]
    fn fused_model_shares_baseline_shapes() {
        let cfg = tiny();
        let rvan = ModelParams::<f32>::init(&cfg, 2).unwrap();
        let base =
            ModelParams::<f32>::init(&ModelConfig { rvafm: RvafmConfig { nsl: 1, ..cfg.rvafm }, ..cfg.clone() }, 2)
                .unwrap();
        let fused = rvan.fused().unwrap();
        let shapes = |m: &ModelParams<f32>| {
            m.named_tensors("").into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect::<Vec<_>>()
        };
        assert_eq!(shapes(&fused), shapes(&base));
        assert_eq!(fused.counts().total, base.counts().total);
        assert!(rvan.counts().total > fused.counts().total);
    }
}
