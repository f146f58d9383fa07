use thiserror::Error;

/// Errors raised across the engine, model, data and training layers.
#[derive(Debug, Error)]
pub enum VigtError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at record {index}: {message}")]
    Format { index: usize, message: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VigtError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        VigtError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        VigtError::Config(msg.into())
    }

    pub(crate) fn format(index: usize, msg: impl Into<String>) -> Self {
        VigtError::Format {
            index,
            message: msg.into(),
        }
    }
}

pub type Result<T, E = VigtError> = std::result::Result<T, E>;
