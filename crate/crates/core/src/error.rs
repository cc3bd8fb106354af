use thiserror::Error;

/// Errors raised by the synthesis library.
#[derive(Debug, Error)]
pub enum BpsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("degenerate predictive covariance: {0}")]
    SingularPredictive(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl BpsError {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            BpsError::Config(_) => 2,
            BpsError::Data(_) | BpsError::Archive(_) | BpsError::Io(_) => 3,
            BpsError::Dimension(_) | BpsError::InvalidInput(_) => 2,
            BpsError::NotPositiveDefinite(_) | BpsError::SingularPredictive(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, BpsError>;
