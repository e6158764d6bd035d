//! Crate-wide error type.

use crate::prior::PriorParams;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by sequence validation, the optimizer, and the on-disk
/// formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("frame index {frame} out of range 0..={max}")]
    FrameOutOfRange { frame: i64, max: usize },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("prior diverged: non-finite network output")]
    PriorDiverged,

    #[error("diverged: non-finite gradient")]
    GradientDiverged,

    /// Training produced a non-finite loss or gradient. The best parameters
    /// seen before the failure are retained so callers can still persist them.
    #[error("optimization diverged at epoch {epoch}; last good epoch {last_good_epoch}")]
    Diverged {
        epoch: usize,
        last_good_epoch: usize,
        best_params: Box<PriorParams>,
    },

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(&'static str),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
