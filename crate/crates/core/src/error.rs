use thiserror::Error;

/// Errors raised by the estimation pipeline and its building blocks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CflError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty control group: the prognostic score needs at least one control row")]
    EmptyControlGroup,

    #[error("degenerate treatment arms: {0}")]
    DegenerateArm(String),

    #[error("perfect separation in the propensity fit: {0}")]
    Separation(String),

    #[error("could not draw a valid sample split after {attempts} attempts: {reason}")]
    DegenerateSplit { attempts: usize, reason: String },

    #[error("level {level} has no units in the {arm} arm")]
    EmptyCell { level: usize, arm: &'static str },

    #[error("all {reps} Monte Carlo replications failed; first error: {first}")]
    AllReplicationsFailed { reps: usize, first: String },
}

impl CflError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CflError::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CflError>;
