use std::path::PathBuf;

use signflow_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("bad file format at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("checkpoint load failed: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, SignError>;

pub(crate) fn contract(msg: impl Into<String>) -> SignError {
    SignError::Contract(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SignError {
    let path = path.into();
    move |source| SignError::Io { path, source }
}
