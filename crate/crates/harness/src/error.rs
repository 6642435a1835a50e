use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} not found at {}; run `clearcf {stage}` first", path.display())]
    MissingStage { what: &'static str, stage: &'static str, path: PathBuf },

    #[error("unknown method {0:?}; expected clear, clear-vae, clear-nc, clear-npa, clear-npx, clear-np, random, eg-ist or eg-rm")]
    UnknownMethod(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] clearcf_core::CoreError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
