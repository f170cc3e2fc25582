//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid format spec: {0}")]
    InvalidFormat(String),

    #[error("grid enumeration too large for e{e}m{m} (e + m must be <= 16)")]
    EnumerationTooLarge { e: u32, m: u32 },

    #[error("scale factor must be strictly positive, got {0}")]
    NonpositiveScale(f64),

    #[error("invalid integer quantization range [{qmin}, {qmax}]")]
    InvalidQuantRange { qmin: i64, qmax: i64 },

    #[error("quantization level is undefined for zero input; callers must bypass zeros")]
    ZeroQuantInput,

    #[error("granularity/shape mismatch: {0}")]
    GranularityMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad file magic in {path}: expected {expected}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("recipe error: {0}")]
    Recipe(String),

    #[error("corpus missing: {0}")]
    CorpusMissing(PathBuf),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("vocabulary mismatch: checkpoint vocab {expected}, requested {got}")]
    VocabMismatch { expected: usize, got: usize },

    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("rows are not normalized probability distributions: {0}")]
    NonNormalizedRows(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
