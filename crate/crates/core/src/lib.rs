//! Material-grounded discussion: ingestion, retrieval, the LLM gateway and
//! the discussion pipelines built on it.

pub mod affinity;
pub mod blend;
pub mod error;
pub mod gateway;
pub mod highlight;
pub mod ingest;
pub mod model;
pub mod report;
pub mod retrieval;
pub mod summarize;
pub mod text;

pub use error::PipelineError;
pub use gateway::{Gateway, GatewayError, ProviderConfig, ProviderKind, StubScript, TemplateId};
pub use ingest::{chunk_material, parse_material, Chunk, ChunkId};
pub use model::{Material, MaterialId, Post, PostId, UserId};

/// Double-precision embedding.
pub type Embedding = retrieval::EmbeddingVector<f64>;
/// Single-precision embedding, for large indexes.
pub type Embedding32 = retrieval::EmbeddingVector<f32>;
pub type Index = retrieval::VectorIndex<f64>;
pub type Index32 = retrieval::VectorIndex<f32>;
pub type Hit = retrieval::SearchResult<f64>;
