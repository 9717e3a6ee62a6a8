use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("class means {a} and {b} coincide")]
    CoincidentMeans { a: usize, b: usize },

    #[error("centered mean of class {class} is zero")]
    ZeroCenteredMean { class: usize },

    #[error("non-finite function value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    #[error("forward cache is stale (cache epoch {cache}, params epoch {params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("seed {seed}, step {step}: {source}")]
    Run {
        seed: u64,
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Shape {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyClass { .. } => "empty_class",
            Error::CoincidentMeans { .. } => "coincident_means",
            Error::ZeroCenteredMean { .. } => "zero_centered_mean",
            Error::NonFinite { .. } => "non_finite",
            Error::StaleCache { .. } => "stale_cache",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Run { source, .. } => source.kind(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
