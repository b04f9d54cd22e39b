use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("timestep {t} out of range for a schedule with {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("degenerate alpha_bar {alpha_bar:e} at t={t}; implicit prediction is undefined")]
    DegenerateAlphaBar { t: usize, alpha_bar: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("non-finite latent at t={t}")]
    NonFiniteLatent { t: usize },

    #[error("steering blow-up at t={t}, n={n}: {reason}")]
    SteeringBlowUp { t: usize, n: usize, reason: String },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular observed-block covariance in component {component}")]
    SingularObservedBlock { component: usize },

    #[error("training diverged at step {step}: loss is {loss}; lower the learning rate")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
