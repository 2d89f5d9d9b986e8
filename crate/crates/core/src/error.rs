use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },

    #[error("division by zero at index {index}")]
    DivisionByZero { index: usize },

    #[error("log of non-positive value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },

    #[error("invalid clamp bounds: lo {lo} > hi {hi}")]
    InvalidClamp { lo: f64, hi: f64 },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,

    #[error("conv2d: {0}")]
    Conv(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("missing input: {}", .0.display())]
    Missing(PathBuf),

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
