use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    /// A function evaluation produced NaN or infinity.
    #[error("numeric error at coordinate {coordinate}: {message}")]
    Numeric { coordinate: usize, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("truncated payload in {path}: expected {expected} elements, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    /// A caller handed an operation inputs outside its contract
    /// (e.g. a different-identity pair to a consistency loss).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("metadata error: {0}")]
    Metadata(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Format { .. } => "format",
            Error::Truncated { .. } => "truncated",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::Invariant(_) => "invariant",
            Error::EmptyInput(_) => "empty_input",
            Error::Label { .. } => "label",
            Error::Contract(_) => "contract",
            Error::Sampling(_) => "sampling",
            Error::Divergence { .. } => "divergence",
            Error::Metadata(_) => "metadata",
            Error::Degenerate(_) => "degenerate",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
