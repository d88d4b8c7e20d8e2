use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index out of bounds: {what} = {index} (limit {limit})")]
    Bounds {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("accounting error: {0}")]
    Accounting(String),

    /// A non-exact segment was closed without the matching solve event.
    #[error("constraint violation in segment {segment}: {message}")]
    ConstraintViolation { segment: usize, message: String },

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("replay buffer not ready: {size} stored, {requested} requested")]
    NotReady { size: usize, requested: usize },

    #[error("search space too large: {0}")]
    SearchTooLarge(String),

    #[error("training diagnostic: {0}")]
    Training(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Serde(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
