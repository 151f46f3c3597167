//! Adam training loop, evaluation and dataset preparation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::ctc::{Alphabet, LabelSeq};
use crate::data::{augment, preprocess, AugmentConfig, LineBox, ParagraphSample, PreprocessConfig};
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::metrics::{corpus_error_rates, ErrorRates};
use crate::model::{total_loss, ModelParams};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub halt_loss_weight: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 60,
            halt_loss_weight: 1.0,
            clip_norm: 5.0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || self.batch_size == 0 || self.halt_loss_weight < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments kept in `f64`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update; `grads` follows the `visit_mut` order of `params`.
    pub fn step<T: Real, P: Parameters<T> + ?Sized>(&mut self, params: &mut P, grads: &[Vec<f64>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} moment buffers",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut i = 0;
        let mut err = None;
        params.visit_mut("", &mut |name, p| {
            let (Some(g), Some(m), Some(v)) = (grads.get(i), self.m.get_mut(i), self.v.get_mut(i)) else {
                err = Some(Error::InvalidArgument(format!("no gradient for {name}")));
                return;
            };
            i += 1;
            if g.len() != p.len() {
                err = Some(Error::InvalidArgument(format!(
                    "gradient for {name} has {} elements, tensor {}",
                    g.len(),
                    p.len()
                )));
                return;
            }
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                if self.lr != 0.0 {
                    let upd = self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                    *x = T::of(x.as_f64() - upd);
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Scales `grads` down to global L2 norm `max_norm`; returns the norm before.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// A sample ready for the model: preprocessed image plus encoded labels.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub index: u64,
    pub image: Tensor<T>,
    pub lines: Vec<String>,
    pub labels: Vec<LabelSeq>,
    pub line_boxes: Vec<LineBox>,
}

impl<T> Prepared<T> {
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }
}

pub fn prepare<T: Real>(
    samples: &[ParagraphSample],
    alphabet: &Alphabet,
    pre: &PreprocessConfig,
    divisors: (usize, usize),
) -> Result<Vec<Prepared<T>>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                index: s.meta.index,
                image: preprocess(&s.image.cast::<T>(), pre, divisors)?,
                labels: s.lines.iter().map(|l| alphabet.encode(l)).collect::<Result<_>>()?,
                lines: s.lines.clone(),
                line_boxes: s.meta.line_boxes.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ctc: f64,
    pub mean_halt: f64,
    /// Samples skipped because a line was too long for CTC.
    pub skipped: usize,
    pub updates: usize,
}

fn divergence(epoch: usize, batch: usize, reason: impl Into<String>) -> Error {
    Error::Divergence { epoch, batch, reason: reason.into() }
}

/// Loss and parameter gradients of one sample, in `visit` order.
pub fn sample_gradients<T: Real>(
    model: &ModelParams<T>,
    image: &Tensor<T>,
    labels: &[LabelSeq],
    halt_weight: f64,
) -> Result<(f64, f64, f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let x = g.constant(image.clone());
    let parts = total_loss(&mut g, &b, x, labels, halt_weight)?;
    let loss = g.value(parts.total).item()?.as_f64();
    let grads = g.backward(parts.total)?;
    Ok((loss, parts.ctc, parts.halt, grads.params()))
}

/// One pass over `data` in a seeded shuffled order. Divergence (a
/// non-finite loss or gradient) aborts the epoch.
pub fn train_epoch<T: Real>(
    model: &mut ModelParams<T>,
    data: &[Prepared<T>],
    cfg: &TrainConfig,
    opt: &mut Adam,
    epoch: usize,
    seed: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, &format!("shuffle.{epoch}")));
    let mut stats = EpochStats { epoch, mean_loss: 0.0, mean_ctc: 0.0, mean_halt: 0.0, skipped: 0, updates: 0 };
    let mut seen = 0usize;
    for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
        let mut acc: Option<Vec<Vec<f64>>> = None;
        let mut count = 0usize;
        for &si in batch {
            let s = &data[si];
            let image = if cfg.augment.any() {
                augment(&s.image, &cfg.augment, &mut rng::stream(seed, &format!("augment.{epoch}.{}", s.index)))?
            } else {
                s.image.clone()
            };
            let (loss, ctc, halt, grads) = match sample_gradients(model, &image, &s.labels, cfg.halt_loss_weight) {
                Ok(r) => r,
                Err(Error::InfeasibleTarget { .. }) => {
                    stats.skipped += 1;
                    continue;
                }
                Err(Error::NonFinite { op }) => return Err(divergence(epoch, bi, format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(divergence(epoch, bi, format!("loss {loss} on sample {}", s.index)));
            }
            stats.mean_loss += loss;
            stats.mean_ctc += ctc;
            stats.mean_halt += halt;
            seen += 1;
            count += 1;
            let acc = acc.get_or_insert_with(|| grads.iter().map(|g| vec![0.0; g.len()]).collect());
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, v) in a.iter_mut().zip(g.data()) {
                    *x += v.as_f64();
                }
            }
        }
        if let Some(mut acc) = acc {
            let inv = 1.0 / count as f64;
            acc.iter_mut().flatten().for_each(|g| *g *= inv);
            let norm = clip_global_norm(&mut acc, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(divergence(epoch, bi, "non-finite gradient norm"));
            }
            opt.step(model, &acc)?;
            stats.updates += 1;
        }
    }
    if seen == 0 {
        return Err(Error::EmptyCorpus);
    }
    let n = seen as f64;
    stats.mean_loss /= n;
    stats.mean_ctc /= n;
    stats.mean_halt /= n;
    Ok(stats)
}

/// Per-sample outcome of [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub index: u64,
    pub truth: String,
    pub hypothesis: String,
    pub true_lines: usize,
    pub predicted_lines: usize,
    pub char_edits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rates: ErrorRates,
    /// Fraction of samples whose predicted line count is exact.
    pub halt_accuracy: f64,
    pub samples: Vec<SampleResult>,
}

/// Greedy decoding of every sample with predicted halting.
pub fn evaluate<T: Real>(model: &ModelParams<T>, data: &[Prepared<T>]) -> Result<Evaluation> {
    let mut samples = Vec::with_capacity(data.len());
    for s in data {
        let rec = model.recognize(&s.image)?;
        let (truth, hypothesis) = (s.text(), rec.text());
        samples.push(SampleResult {
            index: s.index,
            char_edits: crate::metrics::levenshtein(&hypothesis, &truth),
            truth,
            hypothesis,
            true_lines: s.lines.len(),
            predicted_lines: rec.lines.len(),
        });
    }
    let pairs: Vec<(&str, &str)> = samples.iter().map(|s| (s.truth.as_str(), s.hypothesis.as_str())).collect();
    let rates = corpus_error_rates(&pairs)?;
    let exact = samples.iter().filter(|s| s.true_lines == s.predicted_lines).count();
    Ok(Evaluation { rates, halt_accuracy: exact as f64 / samples.len() as f64, samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cer: f64,
    pub val_wer: f64,
    pub val_halt_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
    pub best_val_cer: f64,
    pub best_val_wer: f64,
    pub final_train_loss: f64,
}

/// Trains for `cfg.epochs` epochs, evaluating on `val` after each one.
///
/// On divergence the model is restored to the parameters after the last
/// completed epoch and the error is returned with the curve so far in
/// `partial`.
pub fn train<T: Real>(
    model: &mut ModelParams<T>,
    train_set: &[Prepared<T>],
    val: &[Prepared<T>],
    cfg: &TrainConfig,
    seed: u64,
    partial: &mut Vec<EpochRecord>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut opt = Adam::new(cfg.learning_rate);
    partial.clear();
    for epoch in 1..=cfg.epochs {
        let last_good = model.clone();
        let stats = match train_epoch(model, train_set, cfg, &mut opt, epoch, seed) {
            Ok(s) => s,
            Err(e) => {
                *model = last_good;
                return Err(e);
            }
        };
        let ev = evaluate(model, val)?;
        let rec = EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            val_cer: ev.rates.cer,
            val_wer: ev.rates.wer,
            val_halt_accuracy: ev.halt_accuracy,
        };
        on_epoch(&rec);
        partial.push(rec);
    }
    let best = partial.iter().min_by(|a, b| a.val_cer.total_cmp(&b.val_cer));
    Ok(TrainOutcome {
        best_val_cer: best.map_or(f64::NAN, |r| r.val_cer),
        best_val_wer: best.map_or(f64::NAN, |r| r.val_wer),
        final_train_loss: partial.last().map_or(f64::NAN, |r| r.train_loss),
        curve: partial.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::DenseParams;

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut p = DenseParams::<f32>::init(3, 2, &mut rng::stream(0, "d"));
        let before = p.clone();
        let mut opt = Adam::new(0.0);
        opt.step(&mut p, &[vec![1.0; 6], vec![-2.0; 2]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = DenseParams::<f64>::zeros(1, 1);
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &[vec![3.0], vec![-0.5]]).unwrap();
        assert!((p.weight.data()[0] + 0.1).abs() < 1e-6);
        assert!((p.bias.data()[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
