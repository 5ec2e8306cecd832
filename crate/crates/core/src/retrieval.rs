//! Closed-corpus vector retrieval.
//!
//! One index per material, built from its chunks and never mutated afterwards.
//! Search is an exhaustive cosine scan: materials hold at most a few hundred
//! chunks.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::Arc;

use num_traits::Float;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::{HttpTransport, ProviderConfig, ProviderError};
use crate::ingest::{Chunk, ChunkId};
use crate::model::MaterialId;

pub const STUB_DIMENSION: usize = 64;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(ChunkId),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("index file: {0}")]
    Persist(String),
}

/// A finite, fixed-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Float> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, RetrievalError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> T {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn normalized(&self) -> Result<Self, RetrievalError> {
        let n = self.norm();
        if n == T::zero() {
            return Err(RetrievalError::ZeroNorm);
        }
        Ok(Self { values: self.values.iter().map(|v| *v / n).collect() })
    }
}

impl<T: Float> std::ops::Neg for EmbeddingVector<T> {
    type Output = Self;

    fn neg(self) -> Self {
        Self { values: self.values.into_iter().map(|v| -v).collect() }
    }
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// `dot(a, b) / (|a| |b|)`.
pub fn cosine<T: Float>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<T, RetrievalError> {
    if a.dimension() != b.dimension() {
        return Err(RetrievalError::DimensionMismatch { expected: a.dimension(), got: b.dimension() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(RetrievalError::ZeroNorm);
    }
    Ok(dot(&a.values, &b.values) / (na * nb))
}

pub trait Embedder<T>: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>, RetrievalError>;
}

/// Deterministic hashed bag-of-tokens embedding, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubEmbedder {
    dimension: usize,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self { dimension: STUB_DIMENSION }
    }
}

impl StubEmbedder {
    pub fn with_dimension(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

impl<T: Float> Embedder<T> for StubEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>, RetrievalError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let mut histogram = vec![T::zero(); self.dimension];
        let mut tokens = trimmed
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .peekable();
        if tokens.peek().is_none() {
            let bucket = (fnv1a(trimmed.as_bytes()) % self.dimension as u64) as usize;
            histogram[bucket] = T::one();
        }
        for token in tokens {
            let bucket = (fnv1a(token.as_bytes()) % self.dimension as u64) as usize;
            histogram[bucket] = histogram[bucket] + T::one();
        }
        EmbeddingVector::new(histogram)?.normalized()
    }
}

/// Embeddings endpoint adapter (`{"model", "input"}` in, `data[0].embedding` out).
pub struct LiveEmbedder {
    config: ProviderConfig,
    dimension: usize,
    transport: Arc<dyn HttpTransport>,
}

impl LiveEmbedder {
    pub fn new(config: ProviderConfig, dimension: usize, transport: Arc<dyn HttpTransport>) -> Result<Self, RetrievalError> {
        config.validate()?;
        Ok(Self { config, dimension, transport })
    }
}

impl<T: Float> Embedder<T> for LiveEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<T>, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let secret = self.config.credential.as_ref().map(|c| c.resolve()).transpose()?;
        let body = json!({"model": self.config.model_name, "input": text});
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let reply = self.transport.post_json(endpoint, secret.as_deref(), &body, self.config.timeout())?;
        let values = reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Malformed("missing data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().and_then(T::from).ok_or(RetrievalError::NonFinite))
            .collect::<Result<Vec<T>, _>>()?;
        if values.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch { expected: self.dimension, got: values.len() });
        }
        EmbeddingVector::new(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchResult<T> {
    pub chunk_id: ChunkId,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry<T> {
    pub chunk_id: ChunkId,
    pub vector: EmbeddingVector<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex<T> {
    material_id: MaterialId,
    dimension: usize,
    entries: Vec<IndexEntry<T>>,
}

impl<T: Float> VectorIndex<T> {
    pub fn from_entries(
        material_id: MaterialId,
        dimension: usize,
        entries: Vec<IndexEntry<T>>,
    ) -> Result<Self, RetrievalError> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.chunk_id) {
                return Err(RetrievalError::DuplicateChunk(e.chunk_id));
            }
            if e.vector.dimension() != dimension {
                return Err(RetrievalError::DimensionMismatch { expected: dimension, got: e.vector.dimension() });
            }
            if e.vector.values().iter().any(|v| !v.is_finite()) {
                return Err(RetrievalError::NonFinite);
            }
        }
        Ok(Self { material_id, dimension, entries })
    }

    /// Embeds every chunk of one material.
    pub fn build(material_id: MaterialId, chunks: &[Chunk], embedder: &dyn Embedder<T>) -> Result<Self, RetrievalError> {
        let entries = chunks
            .iter()
            .map(|c| Ok(IndexEntry { chunk_id: c.chunk_id, vector: embedder.embed(&c.text)? }))
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        Self::from_entries(material_id, embedder.dimension(), entries)
    }

    pub fn material_id(&self) -> &MaterialId {
        &self.material_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &[IndexEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `min(k, len)` best entries by cosine score, ties by ascending chunk id.
    pub fn top_k(&self, query: &EmbeddingVector<T>, k: usize) -> Result<Vec<SearchResult<T>>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.dimension() != self.dimension {
            return Err(RetrievalError::DimensionMismatch { expected: self.dimension, got: query.dimension() });
        }
        let mut scored = self
            .entries
            .iter()
            .map(|e| Ok(SearchResult { chunk_id: e.chunk_id, score: cosine(query, &e.vector)? }))
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        scored.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.chunk_id.cmp(&b.chunk_id))
        });
        scored.truncate(k);
        Ok(scored)
    }
}

impl<T: Float + Serialize + DeserializeOwned> VectorIndex<T> {
    pub fn to_json(&self) -> Result<String, RetrievalError> {
        serde_json::to_string(self).map_err(|e| RetrievalError::Persist(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, RetrievalError> {
        let raw: VectorIndex<T> = serde_json::from_str(text).map_err(|e| RetrievalError::Persist(e.to_string()))?;
        Self::from_entries(raw.material_id, raw.dimension, raw.entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        std::fs::write(path, self.to_json()?).map_err(|e| RetrievalError::Persist(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::Persist(e.to_string()))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector<f64> {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let a = v(&[0.3, -1.2, 4.0, 0.5]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((cosine(&a, &(-a.clone())).unwrap() + 1.0).abs() < 1e-9);
        assert_eq!(cosine(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(RetrievalError::ZeroNorm));
        assert!(matches!(cosine(&v(&[1.0]), &v(&[1.0, 0.0])), Err(RetrievalError::DimensionMismatch { .. })));
        assert_eq!(EmbeddingVector::new(vec![f64::NAN]), Err(RetrievalError::NonFinite));
    }

    #[test]
    fn stub_embedder_is_deterministic_and_normalized() {
        let e = StubEmbedder::default();
        let a: EmbeddingVector<f64> = e.embed("The prisoner's dilemma").unwrap();
        let b: EmbeddingVector<f64> = e.embed("The prisoner's dilemma").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dimension(), 64);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        let c: EmbeddingVector<f64> = e.embed("carbon tariffs reshape supply chains").unwrap();
        assert!(cosine(&a, &c).unwrap() < 0.99);
        let p: EmbeddingVector<f64> = e.embed("?!").unwrap();
        assert!((p.norm() - 1.0).abs() < 1e-12);
        assert_eq!(Embedder::<f64>::embed(&e, "  "), Err(RetrievalError::EmptyText));
    }

    #[test]
    fn works_in_f32() {
        let e = StubEmbedder::default();
        let a: EmbeddingVector<f32> = e.embed("cooperation").unwrap();
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    fn index(vectors: &[&[f64]]) -> VectorIndex<f64> {
        let entries = vectors
            .iter()
            .enumerate()
            .map(|(i, x)| IndexEntry { chunk_id: ChunkId(i as u32), vector: v(x) })
            .collect();
        VectorIndex::from_entries(MaterialId::new("m"), 2, entries).unwrap()
    }

    #[test]
    fn top_k_saturates_and_breaks_ties() {
        let idx = index(&[&[0.0, 1.0], &[1.0, 0.0], &[2.0, 0.0], &[1.0, 1.0]]);
        let hits = idx.top_k(&v(&[1.0, 0.0]), 10).unwrap();
        assert_eq!(hits.len(), 4);
        let ids: Vec<u32> = hits.iter().map(|h| h.chunk_id.0).collect();
        assert_eq!(ids, vec![1, 2, 3, 0]);
    }

    #[test]
    fn top_k_errors() {
        let empty: VectorIndex<f64> = VectorIndex::from_entries(MaterialId::new("m"), 2, vec![]).unwrap();
        assert_eq!(empty.top_k(&v(&[1.0, 0.0]), 1), Err(RetrievalError::EmptyIndex));
        let idx = index(&[&[1.0, 0.0]]);
        assert_eq!(idx.top_k(&v(&[1.0, 0.0]), 0), Err(RetrievalError::ZeroK));
    }

    #[test]
    fn index_rejects_duplicates() {
        let e = IndexEntry { chunk_id: ChunkId(1), vector: v(&[1.0, 0.0]) };
        assert_eq!(
            VectorIndex::from_entries(MaterialId::new("m"), 2, vec![e.clone(), e]),
            Err(RetrievalError::DuplicateChunk(ChunkId(1)))
        );
    }
}
