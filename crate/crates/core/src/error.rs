//! Error type shared by every module of the crate.

use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration is inconsistent or names an impossible setting.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed input data or checkpoint content.
    #[error("data error: {0}")]
    Data(String),

    /// A loss or gradient became non-finite during training.
    #[error("non-finite loss in session {session}, epoch {epoch}, episode {episode}: {detail}")]
    Numerical {
        session: usize,
        epoch: usize,
        episode: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
