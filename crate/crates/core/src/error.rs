use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("budget infeasible: requested average sparsity {requested}, maximum achievable {max_achievable}")]
    Infeasible { requested: f64, max_achievable: f64 },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("malformed trace file: {0}")]
    Format(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code for this error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Shape(_) => "E_SHAPE",
            Error::Domain(_) => "E_DOMAIN",
            Error::Infeasible { .. } => "E_INFEASIBLE",
            Error::TooLarge(_) => "E_TOO_LARGE",
            Error::Precondition(_) => "E_PRECONDITION",
            Error::Format(_) => "E_FORMAT",
            Error::Internal(_) => "E_INTERNAL",
            Error::Io(_) => "E_IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
