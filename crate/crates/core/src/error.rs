//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, heads, training, data handling, and metrics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite input to {op}")]
    NonFiniteInput { op: &'static str },

    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),

    #[error("batch normalization in Train mode requires a batch of at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("class index {index} out of range for {classes} classes")]
    InvalidClassIndex { index: usize, classes: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("dataset is empty or lacks the required classes: {0}")]
    EmptyDataset(String),

    #[error("training loss diverged (non-finite) at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("bad magic bytes: not a dataset file")]
    BadMagic,

    #[error("score set `{0}` is empty")]
    EmptyScoreSet(&'static str),

    #[error("cannot combine checkpoints with different head kinds: {0}")]
    MixedHeadKinds(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
