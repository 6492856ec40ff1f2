use std::path::PathBuf;

/// Errors produced by the numeric core, the data pipeline and the training loop.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}{}", context_suffix(.context))]
    Dimension {
        axis: &'static str,
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value at stage `{stage}`")]
    NonFinite { stage: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("instance too large for the loop oracle: C*H*W = {size} exceeds {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn dim(axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            axis,
            expected,
            actual,
            context: String::new(),
        }
    }

    pub fn dim_in(
        axis: &'static str,
        expected: usize,
        actual: usize,
        context: impl Into<String>,
    ) -> Self {
        Error::Dimension {
            axis,
            expected,
            actual,
            context: context.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
