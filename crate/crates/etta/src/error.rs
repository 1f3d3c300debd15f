use thiserror::Error;

/// Crate-wide error type. Variants map to the failure classes the public
/// operations promise: shape/contract violations, schedule misuse, malformed
/// artifacts, and non-finite numerics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("merge plan error: {0}")]
    Plan(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("state error: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
