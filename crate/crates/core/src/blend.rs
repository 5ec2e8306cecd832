//! Conceptual blending with evidence anchoring.
//!
//! Three steps: extract three aspects from each of two posts, turn one aspect
//! from each into an inspiring question in a chosen discussion style, then pull
//! three verbatim excerpts from the material to ground the question.

use std::collections::HashSet;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::gateway::{
    all_of, short_label, words_within, Bindings, Gateway, GatewayError, RuleWarning, TemplateId, ValidationRule, Verdict,
};
use crate::ingest::{Chunk, ChunkId};
use crate::model::{DiscussionStyle, Material, Post, PostId};
use crate::retrieval::{Embedder, VectorIndex, DEFAULT_TOP_K};
use crate::text::{is_verbatim, word_count};

pub const ASPECTS_PER_POST: usize = 3;
pub const MAX_DESCRIPTION_WORDS: usize = 20;
pub const QUESTION_MIN_WORDS: usize = 10;
pub const QUESTION_MAX_WORDS: usize = 40;
pub const QUESTION_TARGET_MIN_WORDS: usize = 20;
pub const QUESTION_TARGET_MAX_WORDS: usize = 30;
pub const EVIDENCE_COUNT: usize = 3;

/// Colors for evidence blocks, by position.
pub const EVIDENCE_COLORS: [&str; EVIDENCE_COUNT] = ["blue", "purple", "teal"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aspect {
    pub keyword: String,
    pub description: String,
    /// Text copied from the owning post's top-level content.
    #[serde(alias = "original_text")]
    pub source_span: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSet {
    pub post_id: PostId,
    pub aspects: Vec<Aspect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectExtraction {
    pub post_a: AspectSet,
    pub post_b: AspectSet,
    pub warnings: Vec<RuleWarning>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlendSelection {
    pub post_a: PostId,
    pub aspect_a: Aspect,
    pub post_b: PostId,
    pub aspect_b: Aspect,
    pub style: DiscussionStyle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InspiringQuestion {
    pub text: String,
    pub style: DiscussionStyle,
    pub word_count: usize,
    /// Set when the length is accepted but outside the 20-30 word target.
    #[serde(default)]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceBlock {
    pub key_concept: String,
    pub excerpt: String,
    pub paragraph_indices: Vec<usize>,
    pub connection: String,
    pub color: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSource {
    /// Excerpts chosen by the model and verified verbatim.
    Model,
    /// Model output kept failing verification; the top retrieved chunks are used as-is.
    RetrievedChunks,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub blocks: Vec<EvidenceBlock>,
    pub source: EvidenceSource,
    pub candidates: Vec<ChunkId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlendArtifact {
    pub selection: BlendSelection,
    pub question: InspiringQuestion,
    pub evidence: Vec<EvidenceBlock>,
    pub evidence_source: EvidenceSource,
}

impl BlendArtifact {
    pub fn new(selection: BlendSelection, question: InspiringQuestion, evidence: EvidenceSet) -> Result<Self, PipelineError> {
        if evidence.blocks.len() != EVIDENCE_COUNT {
            return Err(PipelineError::Domain(format!("blend needs {EVIDENCE_COUNT} evidence blocks, got {}", evidence.blocks.len())));
        }
        Ok(Self { selection, question, evidence: evidence.blocks, evidence_source: evidence.source })
    }
}

// Aspects ------------------------------------------------------------------

/// Checks one aspect against the post it claims to come from.
pub fn check_aspect(aspect: &Aspect, owner: &Post) -> Verdict {
    all_of([
        short_label("aspect keyword", &aspect.keyword, 2),
        words_within("aspect description", &aspect.description, 1, MAX_DESCRIPTION_WORDS),
        Verdict::fail_if(!is_verbatim(&owner.content, &aspect.source_span), || {
            format!("source text {:?} is not in post {}", aspect.source_span, owner.id)
        }),
    ])
}

#[derive(Debug, Deserialize)]
struct RawAspects {
    card1: Vec<Aspect>,
    card2: Vec<Aspect>,
}

fn aspect_rules<'a>(a: &'a Post, b: &'a Post) -> Vec<ValidationRule<'a, RawAspects>> {
    fn set_rules<'a>(which: &'static str, list: &[Aspect], owner: &'a Post) -> [Verdict; 3] {
        let count = Verdict::fail_if(list.len() != ASPECTS_PER_POST, || {
            format!("{which} has {} aspects, expected {ASPECTS_PER_POST}", list.len())
        });
        let keys: HashSet<String> = list.iter().map(|x| x.keyword.trim().to_lowercase()).collect();
        let distinct = Verdict::fail_if(keys.len() != list.len(), || format!("{which} repeats a keyword"));
        let each = all_of(list.iter().map(|x| check_aspect(x, owner)));
        [count, distinct, each]
    }
    vec![
        ValidationRule::new("aspect_count", "three aspects per post", |r: &RawAspects| {
            all_of([set_rules("card1", &r.card1, a)[0].clone(), set_rules("card2", &r.card2, b)[0].clone()])
        }),
        ValidationRule::new("aspect_distinct", "keywords pairwise distinct", |r: &RawAspects| {
            all_of([set_rules("card1", &r.card1, a)[1].clone(), set_rules("card2", &r.card2, b)[1].clone()])
        }),
        ValidationRule::new("aspect_fields", "keyword, description and verbatim source", |r: &RawAspects| {
            all_of([set_rules("card1", &r.card1, a)[2].clone(), set_rules("card2", &r.card2, b)[2].clone()])
        }),
    ]
}

fn check_pair(post_a: &Post, post_b: &Post, material: Option<&Material>) -> Result<(), PipelineError> {
    if post_a.id == post_b.id {
        return Err(PipelineError::Domain("blending needs two distinct posts".into()));
    }
    if post_a.material_id != post_b.material_id {
        return Err(PipelineError::Domain("posts belong to different materials".into()));
    }
    if let Some(m) = material {
        if m.id != post_a.material_id {
            return Err(PipelineError::Domain("posts do not belong to this material".into()));
        }
    }
    Ok(())
}

pub fn extract_aspects(post_a: &Post, post_b: &Post, material: &Material, gateway: &Gateway) -> Result<AspectExtraction, PipelineError> {
    check_pair(post_a, post_b, Some(material))?;
    let bindings = Bindings::new()
        .with("article", material.raw_text.as_str())
        .with("card1", serde_json::json!({"content": post_a.content}).to_string())
        .with("card2", serde_json::json!({"content": post_b.content}).to_string());
    let validated = gateway.complete_structured(TemplateId::AspectExtraction, &bindings, &aspect_rules(post_a, post_b), 0)?;
    let tidy = |list: Vec<Aspect>| -> Vec<Aspect> {
        list.into_iter()
            .map(|x| Aspect { keyword: x.keyword.trim().to_string(), description: x.description.trim().to_string(), source_span: x.source_span })
            .collect()
    };
    Ok(AspectExtraction {
        post_a: AspectSet { post_id: post_a.id, aspects: tidy(validated.value.card1) },
        post_b: AspectSet { post_id: post_b.id, aspects: tidy(validated.value.card2) },
        warnings: validated.warnings,
    })
}

/// Checks that a selection refers to `post_a`/`post_b` and that its aspects are grounded in them.
pub fn check_selection(selection: &BlendSelection, post_a: &Post, post_b: &Post) -> Result<(), PipelineError> {
    check_pair(post_a, post_b, None)?;
    if selection.post_a != post_a.id || selection.post_b != post_b.id {
        return Err(PipelineError::Domain("selection does not match the given posts".into()));
    }
    for (aspect, owner) in [(&selection.aspect_a, post_a), (&selection.aspect_b, post_b)] {
        if let Verdict::Fail(msg) = check_aspect(aspect, owner) {
            return Err(PipelineError::Domain(msg));
        }
    }
    Ok(())
}

// Question -----------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct RawQuestion {
    question: String,
}

/// Accepts 10-40 words; outside 20-30 is a warning.
pub fn question_length(text: &str) -> Verdict {
    let n = word_count(text);
    if !(QUESTION_MIN_WORDS..=QUESTION_MAX_WORDS).contains(&n) {
        Verdict::Fail(format!("question has {n} words, allowed {QUESTION_MIN_WORDS}-{QUESTION_MAX_WORDS}"))
    } else if !(QUESTION_TARGET_MIN_WORDS..=QUESTION_TARGET_MAX_WORDS).contains(&n) {
        Verdict::Warn(format!("question has {n} words, target {QUESTION_TARGET_MIN_WORDS}-{QUESTION_TARGET_MAX_WORDS}"))
    } else {
        Verdict::Pass
    }
}

pub fn generate_question(
    selection: &BlendSelection,
    post_a: &Post,
    post_b: &Post,
    gateway: &Gateway,
) -> Result<InspiringQuestion, PipelineError> {
    check_selection(selection, post_a, post_b)?;
    let bindings = Bindings::new()
        .with("style", selection.style.focus_label())
        .with("keyword_a", selection.aspect_a.keyword.as_str())
        .with("description_a", selection.aspect_a.description.as_str())
        .with("keyword_b", selection.aspect_b.keyword.as_str())
        .with("description_b", selection.aspect_b.description.as_str())
        .with("content_a", post_a.content.as_str())
        .with("content_b", post_b.content.as_str());
    let rules = vec![ValidationRule::new("question_length", "10-40 words", |q: &RawQuestion| question_length(&q.question))];
    let validated = gateway.complete_structured(TemplateId::InspiringQuestion, &bindings, &rules, 0)?;
    let text = validated.value.question.trim().to_string();
    Ok(InspiringQuestion {
        word_count: word_count(&text),
        style: selection.style,
        warning: validated.warnings.into_iter().next().map(|w| w.message),
        text,
    })
}

// Evidence -----------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct RawEvidence {
    evidence: Vec<RawEvidenceItem>,
}

#[derive(Debug, Deserialize)]
struct RawEvidenceItem {
    key_concept: String,
    #[serde(alias = "text")]
    excerpt: String,
    #[serde(default)]
    connection: String,
}

fn evidence_rules(material: &Material) -> Vec<ValidationRule<'_, RawEvidence>> {
    vec![
        ValidationRule::new("evidence_count", "exactly three evidence blocks", |r: &RawEvidence| {
            Verdict::fail_if(r.evidence.len() != EVIDENCE_COUNT, || format!("{} evidence blocks", r.evidence.len()))
        }),
        ValidationRule::new("key_concept_words", "key concepts are 1-2 words", |r: &RawEvidence| {
            all_of(r.evidence.iter().map(|e| words_within("key concept", &e.key_concept, 1, 2)))
        }),
        ValidationRule::new("excerpt_verbatim", "excerpts occur verbatim in the material", move |r: &RawEvidence| {
            all_of(r.evidence.iter().map(|e| {
                Verdict::fail_if(!is_verbatim(&material.raw_text, &e.excerpt), || {
                    format!("excerpt {:?} is not in the material", e.excerpt)
                })
            }))
        }),
    ]
}

#[derive(Debug, Deserialize)]
struct RawLabels {
    evidence: Vec<RawLabel>,
}

#[derive(Debug, Deserialize)]
struct RawLabel {
    key_concept: String,
    #[serde(default)]
    connection: String,
}

fn passages(chunks: &[&Chunk]) -> String {
    chunks
        .iter()
        .enumerate()
        .map(|(i, c)| format!("[passage {} | paragraph {:?}]\n{}", i + 1, c.paragraph_indices, c.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Text embedded to query the index: both aspects and the question.
pub fn evidence_query(selection: &BlendSelection, question: &InspiringQuestion) -> String {
    [
        selection.aspect_a.keyword.as_str(),
        selection.aspect_a.description.as_str(),
        selection.aspect_b.keyword.as_str(),
        selection.aspect_b.description.as_str(),
        question.text.as_str(),
    ]
    .join("\n")
}

/// Retrieval and gateway settings for [`retrieve_evidence`].
pub struct EvidenceContext<'a, T> {
    pub material: &'a Material,
    pub chunks: &'a [Chunk],
    pub index: &'a VectorIndex<T>,
    pub embedder: &'a dyn Embedder<T>,
    pub k: usize,
}

impl<'a, T> EvidenceContext<'a, T> {
    pub fn new(material: &'a Material, chunks: &'a [Chunk], index: &'a VectorIndex<T>, embedder: &'a dyn Embedder<T>) -> Self {
        Self { material, chunks, index, embedder, k: DEFAULT_TOP_K }
    }
}

/// Retrieves the top-k chunks for the selection and question, then asks the
/// model for three verbatim excerpts. If the model never produces three
/// verbatim excerpts, the three best chunks are used directly.
pub fn retrieve_evidence<T: Float>(
    selection: &BlendSelection,
    question: &InspiringQuestion,
    ctx: &EvidenceContext<'_, T>,
    gateway: &Gateway,
) -> Result<EvidenceSet, PipelineError> {
    if ctx.index.is_empty() {
        return Err(PipelineError::State("no indexed chunks for this material".into()));
    }
    if ctx.index.material_id() != &ctx.material.id {
        return Err(PipelineError::State("index belongs to another material".into()));
    }
    let query = ctx.embedder.embed(&evidence_query(selection, question))?;
    let hits = ctx.index.top_k(&query, ctx.k.max(1))?;
    let candidates: Vec<&Chunk> = hits
        .iter()
        .map(|h| {
            ctx.chunks
                .iter()
                .find(|c| c.chunk_id == h.chunk_id)
                .ok_or_else(|| PipelineError::Consistency(format!("index refers to unknown chunk {}", h.chunk_id)))
        })
        .collect::<Result<_, _>>()?;
    let candidate_ids: Vec<ChunkId> = candidates.iter().map(|c| c.chunk_id).collect();
    let keywords = format!("{}, {}", selection.aspect_a.keyword, selection.aspect_b.keyword);
    let bindings = Bindings::new()
        .with("question", question.text.as_str())
        .with("keywords", keywords.as_str())
        .with("passages", passages(&candidates));

    match gateway.complete_structured(TemplateId::Evidence, &bindings, &evidence_rules(ctx.material), 0) {
        Ok(validated) => {
            let blocks = validated
                .value
                .evidence
                .into_iter()
                .enumerate()
                .map(|(i, e)| EvidenceBlock {
                    paragraph_indices: ctx.material.locate(&e.excerpt).unwrap_or_default(),
                    key_concept: e.key_concept.trim().to_string(),
                    excerpt: e.excerpt,
                    connection: e.connection.trim().to_string(),
                    color: EVIDENCE_COLORS[i].to_string(),
                })
                .collect();
            Ok(EvidenceSet { blocks, source: EvidenceSource::Model, candidates: candidate_ids })
        }
        Err(GatewayError::Validation { attempts, .. }) => {
            fallback(selection, &candidates, &bindings, attempts, gateway).map(|blocks| EvidenceSet {
                blocks,
                source: EvidenceSource::RetrievedChunks,
                candidates: candidate_ids,
            })
        }
        Err(other) => Err(other.into()),
    }
}

fn fallback(
    selection: &BlendSelection,
    candidates: &[&Chunk],
    bindings: &Bindings,
    used_nonces: u32,
    gateway: &Gateway,
) -> Result<Vec<EvidenceBlock>, PipelineError> {
    if candidates.len() < EVIDENCE_COUNT {
        return Err(PipelineError::State(format!(
            "only {} chunk(s) retrieved, {EVIDENCE_COUNT} needed for evidence",
            candidates.len()
        )));
    }
    let top = &candidates[..EVIDENCE_COUNT];
    let mut label_bindings = bindings.clone();
    label_bindings.insert("passages", passages(top));
    let label_rules = vec![
        ValidationRule::new("evidence_count", "exactly three labels", |r: &RawLabels| {
            Verdict::fail_if(r.evidence.len() != EVIDENCE_COUNT, || format!("{} labels", r.evidence.len()))
        }),
        ValidationRule::new("key_concept_words", "key concepts are 1-2 words", |r: &RawLabels| {
            all_of(r.evidence.iter().map(|e| words_within("key concept", &e.key_concept, 1, 2)))
        }),
    ];
    let labels: Vec<(String, String)> = match gateway.complete_structured(TemplateId::Evidence, &label_bindings, &label_rules, used_nonces) {
        Ok(v) => v.value.evidence.into_iter().map(|l| (l.key_concept.trim().to_string(), l.connection.trim().to_string())).collect(),
        Err(_) => {
            // Label from the selected aspects when the model cannot label either.
            let fallback_keys = [&selection.aspect_a.keyword, &selection.aspect_b.keyword, &selection.aspect_a.keyword];
            fallback_keys
                .iter()
                .map(|k| (k.split_whitespace().take(2).collect::<Vec<_>>().join(" "), String::new()))
                .collect()
        }
    };
    Ok(top
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (chunk, (key_concept, connection)))| EvidenceBlock {
            key_concept,
            excerpt: chunk.text.clone(),
            paragraph_indices: chunk.paragraph_indices.clone(),
            connection,
            color: EVIDENCE_COLORS[i].to_string(),
        })
        .collect())
}
