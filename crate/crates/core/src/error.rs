use std::path::PathBuf;

use thiserror::Error;

use crate::chemio::FormulaError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Formula(#[from] FormulaError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("dimension mismatch in {tensor}: expected {expected}, got {got}")]
    DimensionMismatch {
        tensor: String,
        expected: usize,
        got: usize,
    },

    #[error("no element feature for: {}", .0.join(", "))]
    MissingFeature(Vec<String>),

    #[error("record {0} has no year; year split requires one on every record")]
    MissingYear(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("no retrieval rows for recipes: {}", .0.join(", "))]
    MissingRetrieval(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact {artifact}; run `{producer}` first")]
    MissingArtifact {
        artifact: String,
        producer: &'static str,
    },

    #[error("stale artifact {artifact}: {reason}; rerun `{producer}`")]
    StaleArtifact {
        artifact: String,
        reason: String,
        producer: &'static str,
    },

    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("workspace {0} is locked by another command")]
    Locked(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(tensor: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            tensor: tensor.into(),
            expected,
            got,
        }
    }
}
