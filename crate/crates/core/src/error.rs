use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("flow step {step}: mix matrix is singular (|det| = {det:e})")]
    Singular { step: usize, det: f64 },

    #[error("degenerate batch: dimension {dim} has standard deviation {std:e}")]
    DegenerateBatch { dim: usize, std: f64 },

    #[error("non-finite value at flow step {step}: {what}")]
    NonFiniteFlow { step: usize, what: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("ill-conditioned fit: {0}")]
    Conditioning(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {}: {section} at offset {offset}: {reason}", path.display())]
    Checkpoint {
        path: PathBuf,
        section: String,
        offset: u64,
        reason: String,
    },

    #[error("image {}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },

    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
