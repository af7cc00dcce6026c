use thiserror::Error;

/// Errors raised by the samplers, filters and experiment pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("model `{0}` has no drift Jacobian; EKF1 linearisation needs one")]
    MissingJacobian(String),

    #[error("innovation covariance is singular at t = {t}")]
    SingularInnovation { t: f64 },

    #[error("innovation covariance {index} is singular")]
    SingularCovariance { index: usize },

    #[error("zero posterior variance for component {component} at step {step}")]
    ZeroVariance { step: usize, component: usize },

    #[error("cannot fit log-log model: {0}")]
    Regression(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for user-facing configuration problems (CLI exit code 2).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
