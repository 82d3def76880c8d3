//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tensor is not attached to a tape")]
    NotOnTape,

    #[error("tape already consumed by a previous backward pass")]
    DeadTape,

    #[error("tensors belong to different tapes")]
    TapeMismatch,

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArg { op, msg: msg.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
