use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} is outside the {kind} vocabulary of size {size}")]
    TokenOutOfVocab { kind: &'static str, id: u32, size: usize },

    #[error("sequence overflow: {0}")]
    SequenceOverflow(String),

    #[error("strategy `{0}` needs query attention rows but the trace has none")]
    MissingQueryRows(String),

    #[error("query is empty")]
    EmptyQuery,

    #[error("missing cached activations: {0}")]
    MissingCache(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint: truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint: tensor table mismatch: {0}")]
    TensorTable(String),

    #[error("scene generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short, stable class name used in CLI error lines and FFI codes.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::TokenOutOfVocab { .. } | Error::SequenceOverflow(_) => "input",
            Error::MissingQueryRows(_) | Error::EmptyQuery | Error::MissingCache(_) => "trace",
            Error::NonFiniteLoss { .. } => "numeric",
            Error::BadMagic(_) | Error::UnsupportedVersion { .. } | Error::Truncated(_) | Error::TensorTable(_) => {
                "checkpoint"
            }
            Error::Generation { .. } => "generation",
            Error::Parse(_) => "parse",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
