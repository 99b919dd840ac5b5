use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("conjugate evaluated outside its domain at y = {y}: {reason}")]
    Domain { y: f64, reason: &'static str },

    #[error("cost function is not admissible for the solver: {0}")]
    Inadmissible(String),

    #[error("shooting solver failed: {0}")]
    Solver(String),

    #[error("simulation failed at step {step}: {reason}")]
    Simulation { step: usize, reason: String },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
