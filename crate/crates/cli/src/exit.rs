//! Process exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | unexpected runtime failure (I/O, internal error) |
//! | 2 | usage error or invalid config |
//! | 3 | missing input: dataset, checkpoint, report or config file |
//! | 4 | verification found failing checks |
//! | 5 | checkpoint incompatible with the dataset or config |
//! | 6 | training diverged (non-finite loss) |
//! | 7 | malformed input file |
//! | 8 | ablation finished but some runs failed |

use std::io::ErrorKind;

use geolle_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exit {
    Success,
    Runtime,
    Usage,
    MissingInput,
    VerifyFailed,
    Incompatible,
    Diverged,
    Malformed,
    PartialAblation,
}

impl Exit {
    pub fn code(self) -> i32 {
        match self {
            Exit::Success => 0,
            Exit::Runtime => 1,
            Exit::Usage => 2,
            Exit::MissingInput => 3,
            Exit::VerifyFailed => 4,
            Exit::Incompatible => 5,
            Exit::Diverged => 6,
            Exit::Malformed => 7,
            Exit::PartialAblation => 8,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{message}")]
pub struct Failure {
    pub code: Exit,
    pub message: String,
}

impl Failure {
    pub fn new(code: Exit, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => Exit::Usage,
            Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => Exit::MissingInput,
            Error::Incompatible(_) => Exit::Incompatible,
            Error::Diverged { .. } => Exit::Diverged,
            Error::Format { .. } | Error::Manifest { .. } | Error::Json(_) => Exit::Malformed,
            _ => Exit::Runtime,
        };
        Failure::new(code, e.to_string())
    }
}
