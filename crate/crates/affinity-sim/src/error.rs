use thiserror::Error;

/// Library-level errors. The CLI maps these onto process exit codes:
/// invalid input / config → 2, invariant violation → 3, internal → 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violation at slot {slot}: {detail}")]
    InvariantViolation { slot: u64, detail: String },
    #[error("internal: {0}")]
    Internal(String),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
