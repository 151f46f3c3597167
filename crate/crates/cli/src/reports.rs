//! JSON and CSV artifacts written by the commands.
//!
//! Reports hold no paths, timestamps or wall-clock times unless timing is
//! what they measure, so reruns with the same inputs are byte-identical.

use std::path::Path;

use rvafm::config::RunConfig;
use rvafm::fusion::{EquivalenceReport, FusionCounts};
use rvafm::model::ParamCounts;
use rvafm::train::{EpochRecord, Evaluation, SampleResult};
use rvafm::DType;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub dtype: DType,
    pub seed: u64,
    pub config: RunConfig,
    pub params: ParamCounts,
    pub epochs: Vec<EpochRecord>,
    pub best_val_cer: Option<f64>,
    pub best_val_wer: Option<f64>,
    pub final_train_loss: Option<f64>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FuseReport {
    pub dtype: DType,
    pub nsl: usize,
    /// Multi-branch and fused weights widened to float64 and compared at
    /// 1e-12: this is the losslessness check.
    pub exact: EquivalenceReport,
    /// The same rollouts in the checkpoint's own precision. Rounding can
    /// push near-zero outputs past the tolerance, so only the halt
    /// decisions are required to agree here.
    pub native: EquivalenceReport,
    pub pass: bool,
    pub counts: FusionCounts,
    pub params_multi: ParamCounts,
    pub params_fused: ParamCounts,
    pub checkpoint_bytes_multi: usize,
    pub checkpoint_bytes_fused: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub cer: f64,
    pub wer: f64,
    pub char_edits: usize,
    pub chars: usize,
    pub word_edits: usize,
    pub words: usize,
    pub halt_accuracy: f64,
    pub results: Vec<SampleResult>,
}

impl EvalReport {
    pub fn new(split: &str, ev: Evaluation) -> Self {
        let r = ev.rates;
        EvalReport {
            split: split.to_string(),
            samples: ev.samples.len(),
            cer: r.cer,
            wer: r.wer,
            char_edits: r.char_edits,
            chars: r.chars,
            word_edits: r.word_edits,
            words: r.words,
            halt_accuracy: ev.halt_accuracy,
            results: ev.samples,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub dtype: DType,
    pub nsl: usize,
    pub images: usize,
    pub rounds: usize,
    pub multi_median_ms: f64,
    pub fused_median_ms: f64,
    /// `multi_median_ms / fused_median_ms`.
    pub speedup: f64,
    pub latency_pass: bool,
    pub fusable_multi: usize,
    pub fusable_fused: usize,
    /// The fused layers hold exactly `1/nsl` of the multi-branch parameters.
    pub size_pass: bool,
    pub checkpoint_bytes_multi: usize,
    pub checkpoint_bytes_fused: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub params_train: usize,
    pub params_fused: usize,
    pub best_val_cer: Option<f64>,
    pub test_cer: Option<f64>,
    pub test_wer: Option<f64>,
    pub test_halt_accuracy: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub diverged: bool,
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::other)?;
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()
}
