//! Conceptual affinity navigation: relate one primary post to every other
//! visible post and order them by relevance.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::PipelineError;
use crate::gateway::{all_of, short_label, Bindings, Gateway, GatewayError, RuleWarning, TemplateId, ValidationRule, Verdict};
use crate::model::{classify_relevance, Post, PostId, RelevanceBand, MEDIUM_RELEVANCE_FROM};
use crate::retrieval::{cosine, Embedder, EmbeddingVector};

pub const NO_AFFINITY: &str = "none";

/// Label used when scores come from embedding similarity instead of the model.
pub const FALLBACK_AFFINITY: &str = "Shared Vocabulary";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityEntry {
    pub post_id: PostId,
    pub affinity_type: String,
    pub relevance_score: f64,
    pub band: RelevanceBand,
    /// The model's own percentage, kept as advisory metadata.
    #[serde(default)]
    pub percentage: Option<f64>,
    #[serde(default)]
    pub theme: Option<String>,
}

impl AffinityEntry {
    pub fn is_none(&self) -> bool {
        self.affinity_type.eq_ignore_ascii_case(NO_AFFINITY)
    }

    pub fn color(&self) -> &'static str {
        self.band.color()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityAnalysis {
    pub entries: Vec<AffinityEntry>,
    /// Scores came from embedding similarity because the provider was unavailable.
    pub fallback: bool,
    pub warnings: Vec<RuleWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityOrdering {
    pub primary_post_id: PostId,
    pub ordered: Vec<AffinityEntry>,
}

#[derive(Debug, Clone, Deserialize)]
struct RawAffinity {
    relationships: Vec<RawRelationship>,
}

#[derive(Debug, Clone, Deserialize)]
struct RawRelationship {
    #[serde(deserialize_with = "lenient_post_id")]
    post_id: PostId,
    affinity_type: String,
    relevance_score: f64,
    #[serde(default)]
    percentage: Option<f64>,
    #[serde(default)]
    theme: Option<String>,
}

/// Accepts `12` or `"12"`.
pub(crate) fn lenient_post_id<'de, D: Deserializer<'de>>(d: D) -> Result<PostId, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        Num(u64),
        Text(String),
    }
    match Either::deserialize(d)? {
        Either::Num(n) => Ok(PostId(n)),
        Either::Text(s) => s.trim().parse().map(PostId).map_err(serde::de::Error::custom),
    }
}

fn card(post: &Post) -> String {
    format!("[id {}] {}", post.id, post.content)
}

fn rules<'a>(expected: &'a BTreeSet<PostId>) -> Vec<ValidationRule<'a, RawAffinity>> {
    vec![
        ValidationRule::new("affinity_coverage", "exactly one entry per candidate", move |r: &RawAffinity| {
            let ids: Vec<PostId> = r.relationships.iter().map(|x| x.post_id).collect();
            let unique: BTreeSet<PostId> = ids.iter().copied().collect();
            Verdict::fail_if(unique.len() != ids.len() || &unique != expected, || {
                format!("entries cover {ids:?}, expected {expected:?}")
            })
        }),
        ValidationRule::new("relevance_range", "scores lie in [0, 1]", |r: &RawAffinity| {
            all_of(r.relationships.iter().map(|x| {
                Verdict::fail_if(!(0.0..=1.0).contains(&x.relevance_score), || {
                    format!("score {} for post {} is outside [0, 1]", x.relevance_score, x.post_id)
                })
            }))
        }),
        ValidationRule::new("affinity_type_words", "1-2 words or none", |r: &RawAffinity| {
            all_of(r.relationships.iter().map(|x| {
                if x.affinity_type.trim().eq_ignore_ascii_case(NO_AFFINITY) {
                    Verdict::Pass
                } else {
                    short_label("affinity type", &x.affinity_type, 2)
                }
            }))
        }),
        ValidationRule::new("none_is_low", "a none affinity has a low score", |r: &RawAffinity| {
            all_of(r.relationships.iter().map(|x| {
                Verdict::fail_if(
                    x.affinity_type.trim().eq_ignore_ascii_case(NO_AFFINITY) && x.relevance_score >= MEDIUM_RELEVANCE_FROM,
                    || format!("post {} has affinity none but score {}", x.post_id, x.relevance_score),
                )
            }))
        }),
    ]
}

fn check_candidates(primary: &Post, candidates: &[Post]) -> Result<(), PipelineError> {
    for c in candidates {
        if c.id == primary.id {
            return Err(PipelineError::Domain("primary post is among the candidates".into()));
        }
        if c.material_id != primary.material_id {
            return Err(PipelineError::Domain(format!("post {} belongs to another material", c.id)));
        }
    }
    Ok(())
}

/// Scores every candidate against `primary` with the language model.
pub fn analyze_affinity(primary: &Post, candidates: &[Post], gateway: &Gateway) -> Result<AffinityAnalysis, PipelineError> {
    check_candidates(primary, candidates)?;
    if candidates.is_empty() {
        return Ok(AffinityAnalysis { entries: vec![], fallback: false, warnings: vec![] });
    }
    let expected: BTreeSet<PostId> = candidates.iter().map(|c| c.id).collect();
    let bindings = Bindings::new()
        .with("primary_id", primary.id.to_string())
        .with("primary", primary.content.as_str())
        .with("candidates", candidates.iter().map(card).collect::<Vec<_>>().join("\n\n"));
    let validated = gateway.complete_structured(TemplateId::Affinity, &bindings, &rules(&expected), 0)?;

    let by_id: HashMap<PostId, RawRelationship> =
        validated.value.relationships.into_iter().map(|r| (r.post_id, r)).collect();
    let entries = candidates
        .iter()
        .map(|c| {
            let r = &by_id[&c.id];
            let affinity_type = r.affinity_type.trim().to_string();
            Ok(AffinityEntry {
                post_id: c.id,
                affinity_type,
                relevance_score: r.relevance_score,
                band: classify_relevance(r.relevance_score)?,
                percentage: r.percentage,
                theme: r.theme.clone(),
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(AffinityAnalysis { entries, fallback: false, warnings: validated.warnings })
}

/// As [`analyze_affinity`], but falls back to embedding similarity when the
/// provider itself fails. Validation failures are still errors.
pub fn analyze_affinity_or_fallback(
    primary: &Post,
    candidates: &[Post],
    gateway: &Gateway,
    embedder: &dyn Embedder<f64>,
) -> Result<AffinityAnalysis, PipelineError> {
    match analyze_affinity(primary, candidates, gateway) {
        Err(PipelineError::Gateway(GatewayError::Provider(_))) => similarity_fallback(primary, candidates, embedder),
        other => other,
    }
}

fn similarity_fallback(
    primary: &Post,
    candidates: &[Post],
    embedder: &dyn Embedder<f64>,
) -> Result<AffinityAnalysis, PipelineError> {
    let anchor: EmbeddingVector<f64> = embedder.embed(&primary.content)?;
    let entries = candidates
        .iter()
        .map(|c| {
            let score = cosine(&anchor, &embedder.embed(&c.content)?)?.clamp(0.0, 1.0);
            let band = classify_relevance(score)?;
            let affinity_type = if band == RelevanceBand::Low { NO_AFFINITY } else { FALLBACK_AFFINITY };
            Ok(AffinityEntry {
                post_id: c.id,
                affinity_type: affinity_type.to_string(),
                relevance_score: score,
                band,
                percentage: None,
                theme: None,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(AffinityAnalysis { entries, fallback: true, warnings: vec![] })
}

/// Display order: score descending, then creation time, then id. Entries
/// labelled `none` go after every other entry.
pub fn order_posts(
    primary: &Post,
    entries: &[AffinityEntry],
    posts_by_id: &HashMap<PostId, Post>,
) -> Result<AffinityOrdering, PipelineError> {
    let mut keyed = entries
        .iter()
        .map(|e| {
            let post = posts_by_id
                .get(&e.post_id)
                .ok_or_else(|| PipelineError::Consistency(format!("no post {} for affinity entry", e.post_id)))?;
            Ok((post.created_at, e.clone()))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    keyed.sort_by(|(ta, a), (tb, b)| {
        a.is_none()
            .cmp(&b.is_none())
            .then_with(|| b.relevance_score.partial_cmp(&a.relevance_score).unwrap_or(Ordering::Equal))
            .then_with(|| ta.cmp(tb))
            .then_with(|| a.post_id.cmp(&b.post_id))
    });
    Ok(AffinityOrdering { primary_post_id: primary.id, ordered: keyed.into_iter().map(|(_, e)| e).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::StubScript;
    use crate::model::{MaterialId, Timestamp, UserId, Visibility};
    use crate::retrieval::StubEmbedder;
    use serde_json::json;

    fn post(id: u64, t: u64, content: &str) -> Post {
        Post {
            id: PostId(id),
            author: UserId::new(format!("u{id}")),
            material_id: MaterialId::new("m"),
            anchor_paragraph: 0,
            content: content.into(),
            visibility: Visibility::Public,
            created_at: Timestamp(t),
            parent: None,
            merged_from: None,
            archived: false,
            highlight: None,
        }
    }

    fn rel(id: u64, ty: &str, score: f64) -> serde_json::Value {
        json!({"post_id": id, "affinity_type": ty, "relevance_score": score, "relevance": "x", "percentage": score * 100.0, "theme": "t"})
    }

    #[test]
    fn bands_follow_scripted_scores() {
        let primary = post(1, 1, "primary");
        let candidates = vec![post(2, 2, "a"), post(3, 3, "b"), post(4, 4, "c")];
        let script = StubScript::new().on(
            TemplateId::Affinity,
            [json!({"relationships": [rel(2, "Theory", 0.9), rel(3, "Policy Link", 0.55), rel(4, "none", 0.1)]})],
        );
        let out = analyze_affinity(&primary, &candidates, &Gateway::stub(script)).unwrap();
        let bands: Vec<_> = out.entries.iter().map(|e| e.band).collect();
        assert_eq!(bands, vec![RelevanceBand::High, RelevanceBand::Medium, RelevanceBand::Low]);
        assert!(!out.fallback);
    }

    #[test]
    fn empty_candidates_make_no_call() {
        let out = analyze_affinity(&post(1, 1, "p"), &[], &Gateway::stub(StubScript::new())).unwrap();
        assert!(out.entries.is_empty());
    }

    #[test]
    fn out_of_range_score_is_retried() {
        let primary = post(1, 1, "p");
        let candidates = vec![post(2, 2, "a")];
        let script = StubScript::new().on(
            TemplateId::Affinity,
            [json!({"relationships": [rel(2, "Theory", 1.4)]}), json!({"relationships": [rel(2, "Theory", 0.8)]})],
        );
        let out = analyze_affinity(&primary, &candidates, &Gateway::stub(script)).unwrap();
        assert_eq!(out.entries[0].relevance_score, 0.8);
    }

    #[test]
    fn missing_candidate_fails_coverage() {
        let primary = post(1, 1, "p");
        let candidates = vec![post(2, 2, "a"), post(3, 3, "b")];
        let only_one = json!({"relationships": [rel(2, "Theory", 0.8)]});
        let script = StubScript::new().on(TemplateId::Affinity, [only_one.clone(), only_one.clone(), only_one]);
        let err = analyze_affinity(&primary, &candidates, &Gateway::stub(script)).unwrap_err();
        assert!(matches!(err, PipelineError::Gateway(ref g) if g.failing_rule() == Some("affinity_coverage")));
    }

    #[test]
    fn three_word_type_is_a_warning() {
        let primary = post(1, 1, "p");
        let candidates = vec![post(2, 2, "a")];
        let script = StubScript::new()
            .on(TemplateId::Affinity, [json!({"relationships": [rel(2, "Economic Theory Application", 0.85)]})]);
        let out = analyze_affinity(&primary, &candidates, &Gateway::stub(script)).unwrap();
        assert_eq!(out.entries[0].affinity_type, "Economic Theory Application");
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn string_ids_are_accepted() {
        let primary = post(1, 1, "p");
        let candidates = vec![post(2, 2, "a")];
        let script = StubScript::new().on(
            TemplateId::Affinity,
            [json!({"relationships": [{"post_id": "2", "affinity_type": "Theory", "relevance_score": 0.5}]})],
        );
        assert!(analyze_affinity(&primary, &candidates, &Gateway::stub(script)).is_ok());
    }

    #[test]
    fn primary_among_candidates_is_rejected() {
        let p = post(1, 1, "p");
        assert!(matches!(analyze_affinity(&p, &[p.clone()], &Gateway::stub(StubScript::new())), Err(PipelineError::Domain(_))));
    }

    #[test]
    fn fallback_on_provider_failure() {
        let primary = post(1, 1, "tariffs and trade cooperation");
        let candidates = vec![post(2, 2, "tariffs and trade cooperation"), post(3, 3, "unrelated zebra migration")];
        let out = analyze_affinity_or_fallback(&primary, &candidates, &Gateway::stub(StubScript::new()), &StubEmbedder::default())
            .unwrap();
        assert!(out.fallback);
        assert_eq!(out.entries[0].band, RelevanceBand::High);
    }

    fn entry(id: u64, ty: &str, score: f64) -> AffinityEntry {
        AffinityEntry {
            post_id: PostId(id),
            affinity_type: ty.into(),
            relevance_score: score,
            band: classify_relevance(score).unwrap(),
            percentage: None,
            theme: None,
        }
    }

    fn lookup(posts: &[Post]) -> HashMap<PostId, Post> {
        posts.iter().map(|p| (p.id, p.clone())).collect()
    }

    #[test]
    fn ordering_is_by_score_then_time() {
        let posts = vec![post(1, 1, "p"), post(2, 5, "a"), post(3, 3, "b"), post(4, 4, "c")];
        let entries = vec![entry(4, "x", 0.1), entry(2, "x", 0.5), entry(3, "x", 0.5)];
        let out = order_posts(&posts[0], &entries, &lookup(&posts)).unwrap();
        let ids: Vec<u64> = out.ordered.iter().map(|e| e.post_id.0).collect();
        assert_eq!(ids, vec![3, 2, 4]);
    }

    #[test]
    fn none_goes_last() {
        let posts = vec![post(1, 1, "p"), post(2, 2, "a"), post(3, 3, "b")];
        let entries = vec![entry(2, "none", 0.3), entry(3, "x", 0.1)];
        let out = order_posts(&posts[0], &entries, &lookup(&posts)).unwrap();
        assert_eq!(out.ordered[1].post_id, PostId(2));
    }

    #[test]
    fn unknown_post_is_consistency_error() {
        let posts = vec![post(1, 1, "p")];
        let err = order_posts(&posts[0], &[entry(9, "x", 0.3)], &lookup(&posts)).unwrap_err();
        assert!(matches!(err, PipelineError::Consistency(_)));
    }
}
