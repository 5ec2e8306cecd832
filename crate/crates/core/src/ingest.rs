//! Material parsing and retrieval chunking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Material, MaterialId, Paragraph, PARAGRAPH_SEPARATOR};
use crate::text::{normalize_newlines, word_count};

pub const DEFAULT_MAX_CHUNK_WORDS: usize = 200;
pub const MIN_CHUNK_WORDS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("material text is empty")]
    Empty,
    #[error("max_chunk_words must be at least {MIN_CHUNK_WORDS}, got {0}")]
    ChunkLimitTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(pub u32);

impl std::fmt::Display for ChunkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: ChunkId,
    pub material_id: MaterialId,
    pub paragraph_indices: Vec<usize>,
    /// Verbatim slice of the paragraph. Inter-sentence whitespace stays with the
    /// preceding chunk so that chunks of a paragraph concatenate back to it.
    pub text: String,
    pub word_count: usize,
}

/// Splits `raw` into blank-line separated paragraphs.
///
/// Line endings are normalized to LF and each block loses its trailing
/// whitespace. The stored `raw_text` is the blocks re-joined by one blank line.
pub fn parse_material(id: MaterialId, title: &str, raw: &str) -> Result<Material, IngestError> {
    let normalized = normalize_newlines(raw);
    let mut blocks: Vec<String> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in normalized.split('\n') {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        blocks.push(current.join("\n"));
    }
    if blocks.is_empty() {
        return Err(IngestError::Empty);
    }

    let paragraphs: Vec<Paragraph> = blocks
        .iter()
        .enumerate()
        .map(|(i, b)| Paragraph::new(i, b.trim_end()))
        .collect();
    let raw_text = paragraphs
        .iter()
        .map(|p| p.text.as_str())
        .collect::<Vec<_>>()
        .join(PARAGRAPH_SEPARATOR);

    Ok(Material { id, title: title.to_string(), paragraphs, raw_text })
}

/// Sentence pieces of `text`. A sentence ends at `.`, `!` or `?` followed by
/// whitespace; the whitespace run belongs to the sentence it follows.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let Some(&(_, next)) = chars.peek() else { break };
        if !next.is_whitespace() {
            continue;
        }
        let mut end = text.len();
        while let Some(&(j, w)) = chars.peek() {
            if w.is_whitespace() {
                chars.next();
            } else {
                end = j;
                break;
            }
        }
        pieces.push(&text[start..end]);
        start = end;
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

/// Cuts every paragraph into chunks of at most `max_chunk_words` words.
///
/// Paragraphs within the limit become one chunk. Longer paragraphs are packed
/// greedily by sentence; a single sentence over the limit is its own chunk.
pub fn chunk_material(material: &Material, max_chunk_words: usize) -> Result<Vec<Chunk>, IngestError> {
    if max_chunk_words < MIN_CHUNK_WORDS {
        return Err(IngestError::ChunkLimitTooSmall(max_chunk_words));
    }
    let mut chunks = Vec::new();
    let mut next_id = 0u32;
    let mut emit = |paragraph: usize, text: &str, chunks: &mut Vec<Chunk>| {
        chunks.push(Chunk {
            chunk_id: ChunkId(next_id),
            material_id: material.id.clone(),
            paragraph_indices: vec![paragraph],
            text: text.to_string(),
            word_count: word_count(text),
        });
        next_id += 1;
    };

    for p in &material.paragraphs {
        if p.word_count <= max_chunk_words {
            emit(p.index, &p.text, &mut chunks);
            continue;
        }
        // Byte offsets into the paragraph so the chunk is a contiguous slice.
        let mut chunk_start = 0;
        let mut chunk_end = 0;
        let mut words = 0;
        for sentence in split_sentences(&p.text) {
            let n = word_count(sentence);
            if words > 0 && words + n > max_chunk_words {
                emit(p.index, &p.text[chunk_start..chunk_end], &mut chunks);
                chunk_start = chunk_end;
                words = 0;
            }
            chunk_end += sentence.len();
            words += n;
        }
        if chunk_end > chunk_start {
            emit(p.index, &p.text[chunk_start..chunk_end], &mut chunks);
        }
    }
    Ok(chunks)
}
