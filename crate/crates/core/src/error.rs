use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index error: {0}")]
    Index(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// An operation was invoked in the wrong lifecycle state (no tape, missing grads, ...).
    #[error("state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    /// An instance failed its own assumption checks; not a bound violation.
    #[error("instance rejected: {0}")]
    Rejected(String),

    /// A checked inequality failed on a valid instance.
    #[error("theory check violated: {0}")]
    Violation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Numeric(_) | Error::Divergence(_) => 3,
            Error::Violation(_) => 4,
            _ => 1,
        }
    }
}
