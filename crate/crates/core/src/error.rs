use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("Thomas rate constant K_T = {kt} L/(g·hr) is not positive at Q = {flow} L/hr")]
    NonPositiveRate { flow: f64, kt: f64 },

    #[error("zeroth moment {mu0:e} is below the support threshold; higher moments are undefined")]
    DegenerateSupport { mu0: f64 },

    #[error("state invariant violated at step {step} (t = {time} hr): {detail}")]
    StateInvariant {
        step: usize,
        time: f64,
        detail: String,
    },

    #[error("terminal variance {variance:e} hr² is at the floor; terminal adjoint is singular")]
    SingularTerminal { variance: f64 },

    #[error("objective time {0} hr is negative")]
    InfeasibleObjectiveTime(f64),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

impl Error {
    pub(crate) fn param(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
