use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {msg}")]
    Shape { node: usize, msg: String },

    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },

    #[error("unbound graph input {0}")]
    Unbound(usize),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("unsupported measure family: {0}")]
    UnsupportedFamily(String),

    #[error("kernel matrix is singular; retry with a larger jitter ({0})")]
    SingularKernel(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
