use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-size output: {0}")]
    EmptyOutput(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input {height}x{width} must be a multiple of {multiple} in both dimensions")]
    Divisibility {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("label id {id} is out of range for {classes} classes")]
    LabelOutOfRange { id: u32, classes: usize },

    #[error("no scored classes: every class has an empty union")]
    NoScoredClasses,

    #[error("step {step} is outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("bad magic")]
    BadMagic,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("unsupported tensor file: {0}")]
    Format(String),

    #[error("dataset sample `{id}`: {reason}")]
    Sample { id: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
