use clearcf_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("graph has {n} nodes but the maximum is {k}")]
    Size { n: usize, k: usize },

    #[error("invalid graph {id}: {reason}")]
    Validation { id: String, reason: String },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Contract(msg.into()))
}
