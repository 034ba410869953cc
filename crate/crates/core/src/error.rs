//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: String },

    #[error("branch {branch}: extent underflow at stage `{stage}` (input extent {extent})")]
    ExtentUnderflow {
        branch: String,
        stage: String,
        extent: usize,
    },

    #[error("width scale {scale} collapses {shape} channels to zero")]
    ScaleUnderflow { shape: String, scale: f64 },

    #[error("parse error at position {pos} in `{text}`: {detail}")]
    Parse {
        text: String,
        pos: usize,
        detail: String,
    },

    #[error("training diverged at step {step} in op `{op}`")]
    Diverged { step: usize, op: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config errors:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
