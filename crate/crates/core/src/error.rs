use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("threshold optimizer error in module {module}: {reason}")]
    Optimizer { module: String, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("artifact error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Numerical(_) => "numerical",
            Error::Training { .. } => "training",
            Error::Optimizer { .. } => "optimizer",
            Error::EmptyInput(_) => "empty_input",
            Error::Checkpoint(_) => "checkpoint",
            Error::Selection(_) => "selection",
            Error::GradCheck(_) => "gradcheck",
            Error::Io { .. } => "io",
        }
    }
}
