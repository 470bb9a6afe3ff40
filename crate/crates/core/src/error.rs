use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the indexing and recommendation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("parse error at offset {offset}: {message}")]
    ParseOffset { offset: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("duplicate item id `{0}`")]
    DuplicateId(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("index conflict: items `{first}` and `{second}` share index {index}")]
    IndexConflict {
        first: String,
        second: String,
        index: String,
    },

    #[error("unresolvable conflict: prefix {prefix:?} holds {size} items but only {codes} last-level codes exist")]
    Unresolvable {
        prefix: Vec<u32>,
        size: usize,
        codes: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("integrity error: {0}")]
    Integrity(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}
