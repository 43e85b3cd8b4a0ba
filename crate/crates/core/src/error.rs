use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented invariant.
    #[error("configuration error: {field}: {message}")]
    Config { field: String, message: String },

    /// Reading tabular data failed.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate label scale: all targets equal {0}")]
    DegenerateScale(f64),

    #[error("insufficient labels: need at least {needed}, got {got}")]
    InsufficientLabels { needed: usize, got: usize },

    #[error("index error: id {id} out of range for {len} entries")]
    Index { id: usize, len: usize },

    /// A non-finite value showed up where the numerics require finite values.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
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
