use std::path::PathBuf;

use thiserror::Error;

use crate::engine::ModelTag;

pub type Result<T, E = ChatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("unknown model tag `{0}`")]
    UnknownTag(String),

    #[error("model variant `{0}` is not loaded")]
    VariantNotLoaded(ModelTag),

    #[error("variant `{tag}`: {msg}")]
    VariantMismatch { tag: ModelTag, msg: String },

    #[error("no retriever is loaded")]
    NoRetriever,

    #[error("no session `{0}`")]
    UnknownSession(String),

    #[error("session `{0}` already has a request in flight")]
    Busy(String),

    #[error("session `{0}` is closed")]
    Closed(String),

    #[error("message text is empty")]
    EmptyMessage,

    #[error("{field} must be an integer in 1..=5, got {value}")]
    ScoreOutOfRange { field: &'static str, value: i64 },

    #[error("turn {0} does not exist")]
    UnknownTurn(usize),

    #[error("turn {0} is not a bot turn")]
    NotBotTurn(usize),

    #[error("turn {0}: image_groundedness given before any image was shared")]
    GroundednessBeforeImage(usize),

    #[error("no session files in {0}")]
    NoResults(PathBuf),

    #[error("{path}: {msg}")]
    CorruptSession { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Model(#[from] mmchat_core::Error),
}

impl ChatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ChatError::Io {
            path: path.into(),
            source,
        }
    }
}
