use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
///
/// The CLI maps each variant family onto a stable exit code, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: extent mismatch on axis {axis}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            op,
            axis,
            expected,
            actual,
        }
    }

    /// 0 success, 2 config error, 3 data error, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::InvalidArgument { .. } | Error::Config(_) | Error::Json(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) => 3,
            Error::NonFiniteGradient(_) | Error::Divergence { .. } => 4,
        }
    }
}
