use thiserror::Error;

use crate::types::ModelVector;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value failed validation. `field` names the offending key.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// Caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The proximal stationarity system has no unique solution.
    #[error("degenerate problem: {0}")]
    Degenerate(String),

    /// An iterative solve produced a non-finite iterate.
    #[error("solver diverged{}: {message}", round.map(|r| format!(" in round {r}")).unwrap_or_default())]
    SolverDivergence {
        message: String,
        round: Option<usize>,
        client: Option<usize>,
        last_finite: ModelVector,
    },

    #[error("cluster divergence is undefined for fewer than two vectors (got {0})")]
    UndefinedDivergence(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Attach round/client context to a divergence error; other variants pass through.
    pub fn in_round(self, round: usize, client: usize) -> Self {
        match self {
            Error::SolverDivergence {
                message,
                last_finite,
                ..
            } => Error::SolverDivergence {
                message,
                round: Some(round),
                client: Some(client),
                last_finite,
            },
            other => other,
        }
    }
}
