use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// Precondition violations (invalid bitwidths, non-positive extents, ...).
    #[error("{0}")]
    Invalid(String),

    #[error("simplex violation in vector {index}: sum {sum}, bounds error {bound_error}")]
    SimplexViolation {
        index: usize,
        sum: f64,
        bound_error: f64,
    },

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("search space too large: {count} configurations exceed cap {cap}")]
    EnumerationCap { count: u128, cap: u128 },

    #[error("no feasible configuration: minimum achievable average bit is {min_average_bit}")]
    Infeasible { min_average_bit: f64 },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("{path}: {message} (byte offset {offset})")]
    MalformedFile {
        path: String,
        message: String,
        offset: u64,
    },

    #[error("{path}: {message} (row {row})")]
    MalformedRow {
        path: String,
        message: String,
        row: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
