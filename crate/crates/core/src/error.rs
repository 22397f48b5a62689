use std::path::PathBuf;

use gwnet_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GwError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("feature `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("loss term `{term}` has no observed entries")]
    NoObserved { term: &'static str },
    #[error("active loss term `{0}` is missing its inputs")]
    MissingTerm(&'static str),
    #[error("non-finite loss at epoch {epoch}, window {window}, term `{term}`")]
    NonFiniteLoss {
        epoch: usize,
        window: usize,
        term: String,
    },
    #[error("CFL condition violated at cell ({row}, {col}): {value:.4} > 0.5")]
    Cfl { row: usize, col: usize, value: f64 },
}

impl GwError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        GwError::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GwError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        GwError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, GwError>;
