use thiserror::Error;

/// Errors raised by estimators, optimizers, objectives and the experiment harness.
#[derive(Debug, Error)]
pub enum ZoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An objective returned NaN or an infinity.
    #[error("non-finite objective value {value} at point {point:?}")]
    NumericFailure { point: Vec<f64>, value: f64 },

    /// Every perturbed loss was identical, so the loss spread used as a scale is zero.
    #[error("degenerate scale: perturbed losses have zero standard deviation")]
    DegenerateScale,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("every step size in the sweep diverged")]
    AllDiverged,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ZoError>;

pub(crate) fn invalid(msg: impl Into<String>) -> ZoError {
    ZoError::InvalidArgument(msg.into())
}
