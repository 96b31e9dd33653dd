use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record {index}: {message}")]
    Parse { index: usize, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("entity {0} not found in knowledge base")]
    Lookup(u32),
    #[error("turn index {t} out of range 1..={len}")]
    TurnIndex { t: usize, len: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("synthetic corpus generation failed: {0}")]
    Generation(String),
    #[error("retrieval failed: {0}")]
    Retrieval(String),
    #[error("accumulation failed: {0}")]
    Accumulation(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("baseline error: {0}")]
    Baseline(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
