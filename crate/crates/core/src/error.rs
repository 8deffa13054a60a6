use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of its valid domain.
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    /// Two arrays that must agree in shape do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A timestep (or other 1-based index) fell outside its range.
    #[error("index {index} out of range 1..={max}")]
    Index { index: usize, max: usize },
    /// A non-finite value or an ill-conditioned computation.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Input is degenerate for the requested quantity (e.g. a zero vector).
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
