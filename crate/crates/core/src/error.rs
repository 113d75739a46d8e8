use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Reference to an attribute the vocabulary does not define.
    #[error("schema error: {0}")]
    Schema(String),

    /// A value that is not legal for its attribute, or a malformed record.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke a shape or range precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("non-finite loss at step {step} (batch {batch}); diagnostics written to {dump}")]
    NonFiniteLoss {
        step: usize,
        batch: String,
        dump: PathBuf,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether the failure was caused by user input (bad config, missing files,
    /// invalid annotations) as opposed to an internal fault.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Io { .. }
                | Error::Format { .. }
                | Error::Json(_)
        )
    }
}
