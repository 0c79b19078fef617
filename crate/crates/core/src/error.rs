use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid episode {episode}: {message}")]
    InvalidEpisode { episode: String, message: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("generation error in episode {episode}: {message}")]
    Generation { episode: usize, message: String },
    #[error("degenerate travel direction: {0}")]
    DegenerateDirection(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("step index {k} out of range for schedule with {steps} steps")]
    StepIndex { k: usize, steps: usize },
    #[error("sampling diverged at reverse step {k}")]
    SamplingDivergence { k: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
