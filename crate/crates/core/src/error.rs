//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the tpkd pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value at channel {channel}, index {index}")]
    NonFinite { channel: usize, index: usize },

    #[error("window {index}: {source}")]
    Window { index: usize, source: Box<Error> },

    #[error("batch size {batch} is not divisible by k = {k}; use drop-last batching")]
    BatchNotDivisible { batch: usize, k: usize },

    #[error("batch size {0} carries no relational knowledge; need at least 2 samples")]
    BatchTooSmall(usize),

    #[error("gradient missing for parameter {0}")]
    MissingGrad(String),

    #[error("tensor is detached from a recording graph; cannot backpropagate")]
    Detached,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("dataset misalignment: {0}")]
    Misaligned(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unknown format version {found:?} (expected {expected:?})")]
    UnknownVersion { found: String, expected: String },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unexpected end of data: {0}")]
    UnexpectedEof(String),

    #[error("header/blob length mismatch: {0}")]
    LengthMismatch(String),

    #[error("container holds {found} data, expected {expected}")]
    WrongKind { expected: String, found: String },

    #[error("layer pair {index}: {reason}")]
    LayerPair { index: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an error with the index of the window that produced it.
    pub fn at_window(self, index: usize) -> Error {
        Error::Window {
            index,
            source: Box::new(self),
        }
    }
}
