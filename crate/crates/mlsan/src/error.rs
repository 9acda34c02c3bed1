use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants map to the distinct failure classes the
/// CLI turns into exit codes: configuration, data/parse, numeric, state.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-deterministic function: {0}")]
    Determinism(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code class used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Parse { .. } | Error::Io { .. } | Error::Checkpoint(_) => 3,
            Error::Numeric(_) | Error::Determinism(_) => 4,
            Error::Dimension { .. } | Error::Index(_) | Error::State(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
