use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation: quaternion norm {norm} is not 1 within tolerance")]
    InvalidRotation { norm: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("attention row {row} has no visible key")]
    NoVisibleKey { row: usize },

    #[error("episode fault: {0}")]
    EpisodeFault(String),

    #[error("demonstration generation failed: {0}")]
    Generation(String),

    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn file(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}
