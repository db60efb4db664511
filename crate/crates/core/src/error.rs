use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("weight matrix is numerically singular (condition estimate {condition:e})")]
    SingularWeight { condition: f64 },

    #[error("non-finite values at iteration {iteration}")]
    NonFinite { iteration: usize, last_finite: Vec<f64> },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("no measurement peaks found")]
    NoPeaks,

    #[error("source {source_index}: {inner}")]
    AtSource {
        source_index: usize,
        inner: Box<Error>,
    },

    #[error("stage-2 solve over {prior_size} columns failed: {inner}")]
    Stage2 { prior_size: usize, inner: Box<Error> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
