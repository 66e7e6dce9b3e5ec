use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RwsError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid layer: {0}")]
    InvalidLayer(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("enumeration needs {needed} bits but the budget allows {budget}")]
    BudgetExceeded { needed: usize, budget: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint block `{block}` is truncated: {bytes} bytes is not a whole number of f64 values")]
    CheckpointTruncated { block: String, bytes: u64 },

    #[error(
        "checkpoint block `{block}` holds {found} values but the manifest declares {declared}"
    )]
    CheckpointShape {
        block: String,
        declared: usize,
        found: usize,
    },

    #[error("malformed checkpoint manifest: {0}")]
    CheckpointManifest(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RwsError {
    pub(crate) fn shape(context: impl Into<String>, expected: usize, got: usize) -> Self {
        RwsError::Shape {
            context: context.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RwsError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, RwsError>;
