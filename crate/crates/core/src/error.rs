use thiserror::Error;

use crate::backend::Role;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A payload did not match its schema. `path` names the offending field
    /// (dot separated, empty for the document root).
    #[error("schema error at `{path}`: {message}")]
    Schema {
        path: String,
        message: String,
        raw: Option<String>,
    },

    #[error("{role} backend failed after {attempts} attempt(s): {message}")]
    Backend {
        role: Role,
        attempts: u32,
        retryable: bool,
        message: String,
    },

    #[error("training diverged at epoch {epoch}: {diagnostics}")]
    NonFinite { epoch: usize, diagnostics: String },

    #[error("all chains failed: {message}")]
    RunFailed {
        message: String,
        trace: Box<crate::engine::Trace>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
            raw: None,
        }
    }

    pub fn with_raw(self, raw: impl Into<String>) -> Self {
        match self {
            Error::Schema { path, message, .. } => Error::Schema {
                path,
                message,
                raw: Some(raw.into()),
            },
            other => other,
        }
    }

    /// Field path of a schema error, if this is one.
    pub fn schema_path(&self) -> Option<&str> {
        match self {
            Error::Schema { path, .. } => Some(path),
            _ => None,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::schema("", err.to_string())
    }
}
