//! Shared domain types.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::word_count;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("relevance score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("peer presence on {kind:?} events must be {expected}")]
    PeerMismatch { kind: EventKind, expected: bool },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl UserId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaterialId(pub String);

impl MaterialId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MaterialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PostId(pub u64);

impl fmt::Display for PostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Server-assigned logical clock value. Strictly increasing across writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub index: usize,
    pub text: String,
    pub word_count: usize,
}

impl Paragraph {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        let text = text.into();
        let word_count = word_count(&text);
        Self { index, text, word_count }
    }
}

/// Reading material split into paragraphs.
///
/// `raw_text` is the paragraphs joined by a single blank line, so every paragraph
/// is a verbatim slice of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Material {
    pub id: MaterialId,
    pub title: String,
    pub paragraphs: Vec<Paragraph>,
    pub raw_text: String,
}

pub const PARAGRAPH_SEPARATOR: &str = "\n\n";

impl Material {
    pub fn paragraph(&self, index: usize) -> Option<&Paragraph> {
        self.paragraphs.get(index)
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    /// Byte offset of each paragraph's first character within `raw_text`.
    pub fn paragraph_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.paragraphs.len());
        let mut at = 0;
        for p in &self.paragraphs {
            offsets.push(at);
            at += p.text.len() + PARAGRAPH_SEPARATOR.len();
        }
        offsets
    }

    /// Indices of the paragraphs overlapping the byte range `start..end` of `raw_text`.
    pub fn paragraphs_in_range(&self, start: usize, end: usize) -> Vec<usize> {
        self.paragraph_offsets()
            .into_iter()
            .zip(&self.paragraphs)
            .filter(|(off, p)| *off < end.max(start + 1) && start < off + p.text.len())
            .map(|(_, p)| p.index)
            .collect()
    }

    /// Paragraphs in which `excerpt` first occurs verbatim, if at all.
    pub fn locate(&self, excerpt: &str) -> Option<Vec<usize>> {
        let needle = crate::text::normalize_newlines(excerpt);
        if needle.is_empty() {
            return None;
        }
        let start = self.raw_text.find(needle.as_ref())?;
        Some(self.paragraphs_in_range(start, start + needle.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Private,
    Public,
}

/// Character range inside the anchor paragraph that the author highlighted.
/// Display metadata only; anchoring is by paragraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightRange {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: PostId,
    pub author: UserId,
    pub material_id: MaterialId,
    pub anchor_paragraph: usize,
    pub content: String,
    pub visibility: Visibility,
    pub created_at: Timestamp,
    #[serde(default)]
    pub parent: Option<PostId>,
    #[serde(default)]
    pub merged_from: Option<Vec<PostId>>,
    /// Sources of a merge are archived: kept for provenance, hidden from listings.
    #[serde(default)]
    pub archived: bool,
    #[serde(default)]
    pub highlight: Option<HighlightRange>,
}

impl Post {
    pub fn is_reply(&self) -> bool {
        self.parent.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceBand {
    High,
    Medium,
    Low,
}

impl RelevanceBand {
    /// Indicator color shown next to an ordered post.
    pub fn color(self) -> &'static str {
        match self {
            RelevanceBand::High => "green",
            RelevanceBand::Medium => "yellow",
            RelevanceBand::Low => "red",
        }
    }
}

pub const HIGH_RELEVANCE_ABOVE: f64 = 0.7;
pub const MEDIUM_RELEVANCE_FROM: f64 = 0.4;

/// High above 0.7, medium on [0.4, 0.7], low below 0.4.
pub fn classify_relevance<T: Float>(score: T) -> Result<RelevanceBand, DomainError> {
    let as_f64 = score.to_f64().unwrap_or(f64::NAN);
    if !(score >= T::zero() && score <= T::one()) {
        return Err(DomainError::ScoreOutOfRange(as_f64));
    }
    let high = T::from(HIGH_RELEVANCE_ABOVE).expect("representable threshold");
    let medium = T::from(MEDIUM_RELEVANCE_FROM).expect("representable threshold");
    Ok(if score > high {
        RelevanceBand::High
    } else if score >= medium {
        RelevanceBand::Medium
    } else {
        RelevanceBand::Low
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscussionStyle {
    Similarity,
    Contrastive,
    Complementary,
}

impl DiscussionStyle {
    pub const ALL: [DiscussionStyle; 3] = [
        DiscussionStyle::Similarity,
        DiscussionStyle::Contrastive,
        DiscussionStyle::Complementary,
    ];

    pub fn color(self) -> &'static str {
        match self {
            DiscussionStyle::Similarity => "green",
            DiscussionStyle::Contrastive => "yellow",
            DiscussionStyle::Complementary => "orange",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DiscussionStyle::Similarity => "similarity",
            DiscussionStyle::Contrastive => "contrastive",
            DiscussionStyle::Complementary => "complementary",
        }
    }

    /// Heading used for the style in prompts.
    pub fn focus_label(self) -> &'static str {
        match self {
            DiscussionStyle::Similarity => "Similarity Focus",
            DiscussionStyle::Contrastive => "Contrastive Focus",
            DiscussionStyle::Complementary => "Complementary Focus",
        }
    }
}

impl fmt::Display for DiscussionStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    View,
    Post,
    Reply,
    Merge,
    Order,
    Summarize,
    PairAnalysis,
    Blend,
    Report,
}

impl EventKind {
    pub fn involves_peer(self) -> bool {
        matches!(self, EventKind::Reply | EventKind::PairAnalysis | EventKind::Blend)
    }
}

/// Which step of the blending flow a blend event records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendStage {
    Aspects,
    Question,
    Evidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementEvent {
    pub user: UserId,
    pub kind: EventKind,
    pub material_id: MaterialId,
    #[serde(default)]
    pub paragraph: Option<usize>,
    #[serde(default)]
    pub peer: Option<UserId>,
    pub timestamp: Timestamp,
    #[serde(default)]
    pub stage: Option<BlendStage>,
}

impl EngagementEvent {
    pub fn new(
        user: UserId,
        kind: EventKind,
        material_id: MaterialId,
        paragraph: Option<usize>,
        peer: Option<UserId>,
        timestamp: Timestamp,
    ) -> Result<Self, DomainError> {
        if kind.involves_peer() != peer.is_some() {
            return Err(DomainError::PeerMismatch { kind, expected: kind.involves_peer() });
        }
        Ok(Self { user, kind, material_id, paragraph, peer, timestamp, stage: None })
    }

    pub fn with_stage(mut self, stage: BlendStage) -> Self {
        self.stage = Some(stage);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn band_boundaries() {
        assert_eq!(classify_relevance(0.8), Ok(RelevanceBand::High));
        assert_eq!(classify_relevance(0.7), Ok(RelevanceBand::Medium));
        assert_eq!(classify_relevance(0.4), Ok(RelevanceBand::Medium));
        assert_eq!(classify_relevance(0.39), Ok(RelevanceBand::Low));
        assert_eq!(classify_relevance(0.0), Ok(RelevanceBand::Low));
        assert_eq!(classify_relevance(1.0), Ok(RelevanceBand::High));
        assert_eq!(classify_relevance(0.7f32), Ok(RelevanceBand::Medium));
        assert_eq!(classify_relevance(0.4f32), Ok(RelevanceBand::Medium));
    }

    #[test]
    fn band_rejects_out_of_range() {
        assert!(classify_relevance(1.01).is_err());
        assert!(classify_relevance(-0.1).is_err());
        assert!(classify_relevance(f64::NAN).is_err());
    }

    #[test]
    fn band_colors() {
        assert_eq!(RelevanceBand::High.color(), "green");
        assert_eq!(RelevanceBand::Medium.color(), "yellow");
        assert_eq!(RelevanceBand::Low.color(), "red");
        assert_eq!(DiscussionStyle::Contrastive.color(), "yellow");
        assert_eq!(DiscussionStyle::Complementary.color(), "orange");
    }

    #[test]
    fn peer_presence_follows_kind() {
        let m = MaterialId::new("m");
        let u = UserId::new("alex");
        assert!(EngagementEvent::new(u.clone(), EventKind::Reply, m.clone(), None, None, Timestamp(1)).is_err());
        assert!(EngagementEvent::new(u.clone(), EventKind::Post, m.clone(), Some(0), Some(u.clone()), Timestamp(1)).is_err());
        assert!(EngagementEvent::new(u.clone(), EventKind::Blend, m, None, Some(u), Timestamp(1)).is_ok());
    }

    #[test]
    fn locate_maps_excerpt_to_paragraphs() {
        let material = Material {
            id: MaterialId::new("m"),
            title: "t".into(),
            paragraphs: vec![Paragraph::new(0, "alpha beta"), Paragraph::new(1, "gamma delta")],
            raw_text: "alpha beta\n\ngamma delta".into(),
        };
        assert_eq!(material.locate("gamma"), Some(vec![1]));
        assert_eq!(material.locate("beta\n\ngamma"), Some(vec![0, 1]));
        assert_eq!(material.locate("omega"), None);
    }

    proptest! {
        #[test]
        fn bands_partition_unit_interval(s in 0.0f64..=1.0) {
            let band = classify_relevance(s).unwrap();
            let expected = if s > 0.7 { RelevanceBand::High } else if s >= 0.4 { RelevanceBand::Medium } else { RelevanceBand::Low };
            prop_assert_eq!(band, expected);
        }
    }
}
