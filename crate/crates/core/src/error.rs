use thiserror::Error;

use crate::gateway::GatewayError;
use crate::model::DomainError;
use crate::retrieval::RetrievalError;

/// Error shared by the discussion pipelines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    State(String),
    #[error("{0}")]
    Consistency(String),
}

impl From<DomainError> for PipelineError {
    fn from(e: DomainError) -> Self {
        PipelineError::Domain(e.to_string())
    }
}
