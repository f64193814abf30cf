use thiserror::Error;

pub type Result<T> = std::result::Result<T, HqmError>;

#[derive(Debug, Error)]
pub enum HqmError {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Rejection sampling ran out of attempts.
    #[error("sampling failed after {attempts} attempts")]
    Sampling { attempts: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HqmError {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            HqmError::Config(_) => 2,
            HqmError::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> HqmError {
    HqmError::Shape(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> HqmError {
    HqmError::Contract(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> HqmError {
    HqmError::Config(msg.into())
}
