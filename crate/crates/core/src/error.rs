use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed in something that violates an operation's precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// Model parameters violate a structural invariant (orthonormality, invertibility).
    #[error("invalid model state: {0}")]
    ModelState(String),

    /// A factorization or orthogonalization failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training produced a non-finite quantity.
    #[error("training diverged: {0}")]
    Training(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::RejectedInput(_) | Error::Io(_) => 2,
            Error::Numerical(_) | Error::Training(_) | Error::ModelState(_) | Error::Tensor(_) => 3,
        }
    }
}
