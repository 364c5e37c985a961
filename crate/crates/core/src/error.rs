//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// NaN or infinity where finite values are required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Invalid argument or configuration (usage error, CLI exit code 2).
    #[error("{0}")]
    Config(String),

    /// Operation variant not supported by this implementation.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Malformed file content (bad magic, truncation, version mismatch).
    #[error("format error in {path} at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI contract: 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
