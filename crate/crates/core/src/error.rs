use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token index {index} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { index: usize, vocab: usize },

    #[error("abstention saturated in task `{task}`: {detail}")]
    Saturation { task: String, detail: String },

    #[error("empty cohort: filter `{filter}` removed every report")]
    EmptyCohort { filter: String },

    #[error("truncation at threshold {threshold} removed every column; try a smaller threshold")]
    AllColumnsRemoved { threshold: f64 },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
