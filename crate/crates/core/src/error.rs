use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or lengths do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Cross-batch statistics need more samples than were given.
    #[error("batch-size error: need at least {min} samples, got {got}")]
    BatchSize { got: usize, min: usize },

    /// Input data is missing, empty or too short.
    #[error("data error: {0}")]
    Data(String),

    /// A binary or text file did not parse.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// A function under evaluation produced a non-finite value, or a metric
    /// was asked for on inputs where it is undefined.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A scoring request could not be served by the checkpoint.
    #[error("inference error: {0}")]
    Inference(String),

    /// A structural invariant failed during training or scoring.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
