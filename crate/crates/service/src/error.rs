//! Service-layer errors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    /// A task referenced a model with no registered instance.
    #[error("no registered instance serves model `{model}`")]
    Routing { model: String },

    /// A node failed to report ready before the startup timeout.
    #[error("startup failed: node {node} not ready within {timeout_seconds} s")]
    StartupFailure { node: usize, timeout_seconds: f64 },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    /// The workload does not fit the instance (context overflow or the
    /// engine refused admission).
    #[error("capacity: {0}")]
    Capacity(String),

    #[error("broker is shut down")]
    QueueClosed,

    #[error(transparent)]
    Engine(#[from] rackline_core::Error),
}

pub type Result<T> = std::result::Result<T, ServiceError>;
