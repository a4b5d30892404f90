use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown concept kind `{0}`")]
    UnknownConcept(String),
    #[error("unknown condition token(s): {}", .0.join(", "))]
    UnknownToken(Vec<String>),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("non-convergence: {0}")]
    NonConvergence(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("image decode: {0}")]
    Image(String),
    #[error(transparent)]
    Nn(#[from] ctraj_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
