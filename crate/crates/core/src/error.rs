use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward was already run on this graph; rebuild it with a new forward pass")]
    StaleGraph,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("attention step budget exhausted ({0} steps)")]
    StepBudgetExhausted(usize),

    #[error("parameters are already fused")]
    AlreadyFused,

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("target of length {target_len} (with {repeats} repeats) cannot be aligned to {frames} frames")]
    InfeasibleTarget { frames: usize, target_len: usize, repeats: usize },

    #[error("symbol {0:?} is not in the alphabet")]
    UnknownSymbol(char),

    #[error("corpus is empty or has no ground-truth characters")]
    EmptyCorpus,

    #[error("text does not fit the image: {0}")]
    TextOverflow(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Divergence { epoch: usize, batch: usize, reason: String },

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint manifest is corrupt: {0}")]
    Manifest(String),

    #[error("tensor {name:?} has corrupt offsets ({detail})")]
    CorruptOffsets { name: String, detail: String },

    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("checkpoint dtype is {found}, requested {expected}")]
    DtypeMismatch { found: String, expected: String },

    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
