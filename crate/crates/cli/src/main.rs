//! `rvafm`: train, fuse, evaluate and benchmark paragraph recognizers.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 verification failure,
//! 3 training divergence.

mod commands;
mod reports;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rvafm::config::Overrides;
use rvafm::data::Split;
use rvafm::rvafm::Ablation;

#[derive(Parser, Debug)]
#[command(name = "rvafm", version, about = "Multi-branch vertical attention: train, fuse, evaluate, benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Branches per re-parameterizable layer during training.
    #[arg(long, global = true, value_name = "N")]
    pub nsl: Option<usize>,
    /// Attention hidden width.
    #[arg(long = "c-u", global = true, value_name = "N")]
    pub c_u: Option<usize>,
    /// Keep only one multi-branch layer, or none.
    #[arg(long, global = true, value_enum)]
    pub ablate: Option<AblateArg>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on the synthetic corpus; writes model.ckpt, report.json, loss_curve.csv.
    Train,
    /// Fuse a trained checkpoint and verify the fused rollouts; writes fused.ckpt.
    Fuse {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Random rollouts compared during verification.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Greedy-decode a split and report CER, WER and halting accuracy.
    Eval {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Median forward latency of the multi-branch and fused model.
    Bench {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Timed passes over the image set.
        #[arg(long, default_value_t = 15)]
        rounds: usize,
        #[arg(long, default_value_t = 8)]
        images: usize,
    },
    /// Train and evaluate one model per value of a hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. `1,2,3` or `none,dh,all-dense`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Export the train, val and test splits as PGM images plus transcriptions.
    GenData,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateArg {
    None,
    Dh,
    Df,
    Dj,
    Da,
    F,
    AllDense,
}

impl From<AblateArg> for Ablation {
    fn from(a: AblateArg) -> Self {
        match a {
            AblateArg::None => Ablation::None,
            AblateArg::Dh => Ablation::Dh,
            AblateArg::Df => Ablation::Df,
            AblateArg::Dj => Ablation::Dj,
            AblateArg::Da => Ablation::Da,
            AblateArg::F => Ablation::F,
            AblateArg::AllDense => Ablation::AllDense,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Nsl,
    #[value(name = "c-u")]
    CU,
    Ablate,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, nsl: self.nsl, c_u: self.c_u, ablate: self.ablate.map(Into::into) }
    }
}

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Verification(String),
    Divergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Verification(_) => 2,
            Failure::Divergence(_) => 3,
        }
    }
}

impl From<rvafm::Error> for Failure {
    fn from(e: rvafm::Error) -> Self {
        match e {
            rvafm::Error::Divergence { .. } => Failure::Divergence(e.to_string()),
            rvafm::Error::Config(list) => Failure::Usage(format!("invalid configuration:\n  {}", list.join("\n  "))),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Verification(m) | Failure::Divergence(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
