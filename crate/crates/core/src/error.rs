use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library. The CLI maps each variant onto a
/// process exit code via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("lookup error: unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("not converged: {0}")]
    NotConverged(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit codes: 2 schema/validation, 3 numeric failure, 4 not converged.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotConverged(_) => 4,
            Error::Numeric(_) | Error::Domain(_) | Error::Shape { .. } => 3,
            _ => 2,
        }
    }

    /// Short machine-readable tag used in the CLI's stderr JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Shape { .. } => "shape",
            Error::Schema(_) => "schema",
            Error::Lookup { .. } => "lookup",
            Error::Assembly(_) => "assembly",
            Error::Split(_) => "split",
            Error::Numeric(_) => "numeric",
            Error::NotConverged(_) => "not_converged",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
