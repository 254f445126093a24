use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A model document or constructor argument violates an invariant.
    #[error("invalid model at {location}: {message}")]
    InvalidModel { location: String, message: String },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error(
        "enumeration budget of {budget} weighted histories exceeded; \
         use the Monte-Carlo estimator instead"
    )]
    BudgetExceeded { budget: usize },

    /// A bound that must hold for every instance was violated.
    #[error("{bound} violated: slack {slack:.3e}")]
    BoundViolated { bound: &'static str, slack: f64 },

    #[error("grid cells from more than one filter mode")]
    MixedModes,

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn model(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidModel {
            location: location.into(),
            message: message.into(),
        }
    }
}
