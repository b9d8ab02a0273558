use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Structured-text input did not match its schema.
    #[error("schema error at line {line}, column {column}: {message}")]
    Schema {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("reference error: {0}")]
    Reference(String),

    #[error("invalid feeder: {0}")]
    InvalidFeeder(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("power flow diverged after {iterations} iterations (last residual {residual:e})")]
    Diverged { iterations: usize, residual: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("model/feeder mismatch: {0}")]
    Mismatch(String),

    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema_from_json(err: &serde_json::Error) -> Self {
        Error::Schema {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
