use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value encountered in {context}")]
    NonFiniteValue { context: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("agent index {agent} out of range for {agents} agents")]
    BadAgentIndex { agent: usize, agents: usize },

    #[error("topology is disconnected")]
    Disconnected,

    #[error("power iteration did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("operation requires the {expected} task family")]
    UnsupportedFamily { expected: &'static str },

    #[error("mixing rate {0} must lie in [0, 1)")]
    LambdaOutOfRange(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFiniteValue {
            context: context.into(),
        }
    }

    pub(crate) fn dims(expected: usize, got: usize) -> Self {
        Error::DimensionMismatch { expected, got }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
