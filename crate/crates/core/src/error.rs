use thiserror::Error;

use crate::expr::ExprError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the operation's domain (negative time, empty interval).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Gain or Lyapunov design could not produce a valid result.
    #[error("design error: {0}")]
    Design(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Expr(#[from] ExprError),

    #[error("agent {agent}: {source}")]
    Agent {
        agent: usize,
        #[source]
        source: ExprError,
    },

    /// The closed loop produced a non-finite value.
    #[error("divergence at t = {time}: {location}")]
    Divergence { time: f64, location: String },

    #[error("assumption checks failed: {0}")]
    Assumptions(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
