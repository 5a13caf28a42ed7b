use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;
use crate::train::DivergenceReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("saliency map has no pixel above 0.5")]
    NoSalientRegion,
    #[error("{what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("malformed {kind} file {path}: {msg}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {}: {}", .0.step, .0.reason)]
    Diverged(Box<DivergenceReport>),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
