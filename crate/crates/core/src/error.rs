use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("integration diverged at step {step}")]
    IntegrationDiverged { step: usize },

    #[error("dimension {dim} is degenerate (max == min) on the training split")]
    DegenerateDimension { dim: usize },

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("non-finite gradient at flat index {index}")]
    PoisonedGradient { index: usize },

    #[error("training failed at iteration {iteration}: {reason}")]
    TrainingFailure { iteration: usize, reason: String },

    #[error("forecast diverged at step {step} of sample {sample}")]
    ForecastDiverged {
        step: usize,
        sample: usize,
        partial: Box<crate::simulate::ForecastEnsemble>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
