use margin_core::gateway::GatewayError;
use margin_core::ingest::IngestError;
use margin_core::PipelineError;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::store::StoreError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServiceError {
    #[error("{0}")]
    Unauthorized(String),
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Conflict(String),
    #[error("show public needs {required} private posts, you have {have}")]
    Gating { required: usize, have: usize },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<IngestError> for ServiceError {
    fn from(e: IngestError) -> Self {
        ServiceError::Validation(e.to_string())
    }
}

/// Machine-readable error body.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorEnvelope {
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Unauthorized(_) => "unauthorized",
            ServiceError::Forbidden(_) => "forbidden",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Validation(_) => "validation",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Gating { .. } => "gating",
            ServiceError::Pipeline(p) => match p {
                PipelineError::Gateway(GatewayError::Validation { .. }) => "llm_validation",
                PipelineError::Gateway(GatewayError::Provider(_)) => "llm_provider",
                PipelineError::Gateway(_) => "llm_template",
                PipelineError::Retrieval(_) => "retrieval",
                PipelineError::Domain(_) => "validation",
                PipelineError::State(_) => "state",
                PipelineError::Consistency(_) => "internal",
            },
            ServiceError::Store(StoreError::RetriesExhausted { .. } | StoreError::Conflict { .. }) => "conflict",
            ServiceError::Store(_) => "storage",
        }
    }

    pub fn detail(&self) -> Value {
        match self {
            ServiceError::Gating { required, have } => {
                json!({"required": required, "have": have, "remaining": required.saturating_sub(*have)})
            }
            ServiceError::Pipeline(PipelineError::Gateway(GatewayError::Validation { rule_id, attempts, .. })) => {
                json!({"rule_id": rule_id, "attempts": attempts})
            }
            _ => Value::Null,
        }
    }

    pub fn envelope(&self) -> ErrorEnvelope {
        ErrorEnvelope { code: self.code(), message: self.to_string(), detail: self.detail() }
    }
}
