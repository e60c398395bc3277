use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("cross_entropy: every target is ignored")]
    AllTargetsIgnored,

    #[error("target id {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: i64, vocab: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("{file}: JSON parse error at line {line}, column {column}: {msg}")]
    Parse {
        file: String,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("dialogue {dialogue_id}: {msg}")]
    Record { dialogue_id: String, msg: String },

    #[error("image `{image_ref}`: {msg}")]
    ImageLoad { image_ref: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("index fingerprint {found} does not match checkpoint {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("non-finite loss at step {step}; batch ids: {batch_ids:?}")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
