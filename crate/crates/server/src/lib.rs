//! Multi-user discussion service: versioned storage, the forum rules and the
//! HTTP API over the pipelines in `margin_core`.

pub mod config;
pub mod error;
pub mod http;
pub mod service;
pub mod store;

pub use error::{ErrorEnvelope, ServiceError};
pub use service::{Forum, NewPost, ServiceConfig};
