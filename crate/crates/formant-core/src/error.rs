//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by signal processing, model, training, and data loading.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("utterance too short: {len} samples, need at least {min}")]
    UtteranceTooShort { len: usize, min: usize },

    #[error("frequency out of range: {hz} Hz not in [0, {max_hz}]")]
    FrequencyOutOfRange { hz: f64, max_hz: f64 },

    #[error("bin index {index} out of range (num_bins = {num_bins})")]
    BinOutOfRange { index: usize, num_bins: usize },

    #[error("shape mismatch: {context} (expected {expected}, got {got})")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("no supervised frames: every target column is excluded")]
    NoSupervisedFrames,

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error("silent frame: zero signal energy")]
    SilentFrame,

    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid synthesis spec: {0}")]
    InvalidSynthSpec(String),

    #[error("manifest error for utterance '{id}': {reason}")]
    ManifestEntry { id: String, reason: String },

    #[error("parse error in {path} at line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
