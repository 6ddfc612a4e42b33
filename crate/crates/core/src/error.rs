use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DrueError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing dependency: {artifact} not found; run `{run_first}` first")]
    MissingDependency { artifact: String, run_first: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged in stage {stage} at epoch {epoch}: {detail}")]
    Diverged {
        stage: String,
        epoch: usize,
        detail: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("run directory {0} is locked by another command")]
    Locked(PathBuf),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DrueError {
    pub fn config(msg: impl Into<String>) -> Self {
        DrueError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        DrueError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DrueError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn missing(artifact: impl Into<String>, run_first: impl Into<String>) -> Self {
        DrueError::MissingDependency {
            artifact: artifact.into(),
            run_first: run_first.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DrueError::Config(_) => 2,
            DrueError::MissingDependency { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T, E = DrueError> = std::result::Result<T, E>;
