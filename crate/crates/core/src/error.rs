use std::path::PathBuf;

use cpdae_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("encoding error: token id {id} at position {position} of sequence {sequence} is outside the vocabulary of {vocab}")]
    Encoding {
        sequence: usize,
        position: usize,
        id: u32,
        vocab: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("{0}")]
    Contract(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: String, expected: String },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("malformed {what}: {msg}")]
    Parse { what: String, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by NaN/Inf values rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
