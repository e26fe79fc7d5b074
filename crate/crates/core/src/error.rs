use thiserror::Error;

/// Failures of the numeric core.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: operand `{operand}` has shape {got:?}, expected {expected}")]
    Dimension {
        op: &'static str,
        operand: &'static str,
        got: Vec<usize>,
        expected: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("index {index} out of range 0..{len} in {context}")]
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("fixed-point iteration diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training aborted at epoch {epoch}, batch {batch}: non-finite loss (recent losses {losses:?})")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        losses: Vec<f64>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Checkpoint(#[from] crate::harness::CheckpointError),
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(
    op: &'static str,
    operand: &'static str,
    got: &[usize],
    expected: impl Into<String>,
) -> Error {
    Error::Dimension {
        op,
        operand,
        got: got.to_vec(),
        expected: expected.into(),
    }
}
