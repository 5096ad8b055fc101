//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    /// Malformed or inconsistent configuration input.
    #[error("config error: {0}")]
    Config(String),
    /// A well-formed problem admits no feasible solution.
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PlanError {
    pub fn config(msg: impl Into<String>) -> Self {
        PlanError::Config(msg.into())
    }

    pub fn infeasible(msg: impl Into<String>) -> Self {
        PlanError::Infeasible(msg.into())
    }
}
