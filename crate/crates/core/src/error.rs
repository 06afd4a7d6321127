use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("idx magic mismatch: expected 0x000008xx, found {found:#010x}")]
    MagicMismatch { found: u32 },

    #[error("idx payload truncated: header promises {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("unsupported idx rank {0} (expected 1 or 3)")]
    UnsupportedRank(u8),

    #[error("unsupported image shape {height}x{width} (expected 28x28)")]
    UnsupportedShape { height: usize, width: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("empty score table: {0}")]
    EmptyTable(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate init batch: per-unit output variance {variance:e} below 1e-10")]
    DegenerateBatch { variance: f64 },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("input is not binary: found value {0}")]
    NonBinaryInput(f64),

    #[error("invalid k={k} for a model with {layers} stochastic layers")]
    InvalidK { k: usize, layers: usize },

    #[error("invalid l={l} for a model with {layers} stochastic layers")]
    InvalidL { l: usize, layers: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("insufficient reference rows: {found} < {required}")]
    InsufficientReference { found: usize, required: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical instability: {0}")]
    NumericalInstability(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
