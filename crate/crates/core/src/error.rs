use std::io;
use std::path::Path;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid fusion graph: {0}")]
    Graph(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error("unknown operation `{0}`")]
    UnknownOp(String),
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<Path>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// Short machine-readable category, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Graph(_) => "graph",
            Error::Degenerate(_) => "degenerate",
            Error::Oracle(_) => "oracle",
            Error::UnknownOp(_) => "unknown-op",
            Error::Format(_) => "format",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    /// Process exit code: 1 for validation failures, 2 for I/O and parse errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_) | Error::Parse { .. } | Error::Io { .. } | Error::Json { .. } => 2,
            _ => 1,
        }
    }
}
