use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("instance {instance}: {reason}")]
    Rejected { instance: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("backward called without a retained forward trace")]
    NoForwardTrace,

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn rejected(instance: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Rejected {
            instance: instance.into(),
            reason: reason.into(),
        }
    }

    /// Fills in the instance id of a rejection raised below the task layer.
    pub fn for_instance(self, id: &str) -> Self {
        match self {
            Error::Rejected { instance, reason } if instance.is_empty() => Error::Rejected {
                instance: id.to_string(),
                reason,
            },
            other => other,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied data rather than configuration
    /// or internal state.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Rejected { .. }
                | Error::Checkpoint(_)
                | Error::File { .. }
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}
