//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("format version mismatch in {path}: expected {expected:?}, found {found:?}")]
    Version {
        path: String,
        expected: String,
        found: String,
    },

    #[error("corrupt file {path}: {msg}")]
    Corrupt { path: String, msg: String },

    #[error("unknown codepoint U+{codepoint:04X} on page {page}")]
    UnknownCodepoint { codepoint: u32, page: String },

    #[error("shape mismatch for tensor {tensor}: expected {expected:?}, found {found:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training diverged at stage {stage} epoch {epoch} batch {batch}: max |grad| = {max_grad}")]
    Diverged {
        stage: usize,
        epoch: usize,
        batch: usize,
        max_grad: f64,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
