//! Bullet summaries of a post, optionally with its reply thread.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::gateway::{all_of, words_within, Bindings, Gateway, TemplateId, ValidationRule, Verdict};
use crate::model::{Post, PostId};

pub const MAX_BULLETS: usize = 3;
pub const MAX_BULLET_WORDS: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub target_post_id: PostId,
    pub bullets: Vec<String>,
    pub includes_replies: bool,
    /// Regeneration counter; the nonce of the provider call that produced the bullets.
    pub nonce: u32,
    /// The nested-object binding the summary was generated from.
    pub source: String,
}

#[derive(Debug, Deserialize)]
struct RawSummary {
    bullets: Vec<String>,
}

#[derive(Serialize)]
struct Node<'a> {
    author: &'a str,
    content: &'a str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    children: Vec<Node<'a>>,
}

/// Nested `{author, content, children}` object for `root` and its replies.
///
/// Children are listed depth-first, siblings by creation time.
pub fn thread_binding(root: &Post, descendants: &[Post]) -> Result<String, PipelineError> {
    let mut known: HashSet<PostId> = descendants.iter().map(|p| p.id).collect();
    known.insert(root.id);
    let mut children: HashMap<PostId, Vec<&Post>> = HashMap::new();
    for p in descendants {
        match p.parent {
            Some(parent) if known.contains(&parent) && p.id != root.id => children.entry(parent).or_default().push(p),
            _ => return Err(PipelineError::Domain(format!("post {} is not a reply within the thread of {}", p.id, root.id))),
        }
    }
    for list in children.values_mut() {
        list.sort_by_key(|p| (p.created_at, p.id));
    }

    fn build<'a>(post: &'a Post, children: &HashMap<PostId, Vec<&'a Post>>, depth: usize) -> Node<'a> {
        let kids = if depth > 64 {
            Vec::new()
        } else {
            children.get(&post.id).map(|v| v.iter().map(|c| build(c, children, depth + 1)).collect()).unwrap_or_default()
        };
        Node { author: post.author.as_str(), content: &post.content, children: kids }
    }

    let tree = build(root, &children, 0);
    let reachable = count(&tree) - 1;
    if reachable != descendants.len() {
        return Err(PipelineError::Domain(format!("reply tree of {} is not connected", root.id)));
    }
    Ok(serde_json::to_string_pretty(&tree).expect("thread serializes"))
}

fn count(node: &Node<'_>) -> usize {
    1 + node.children.iter().map(count).sum::<usize>()
}

fn rules<'a>() -> Vec<ValidationRule<'a, RawSummary>> {
    vec![
        ValidationRule::new("bullet_count", "1-3 bullets", |s: &RawSummary| {
            Verdict::fail_if(s.bullets.is_empty() || s.bullets.len() > MAX_BULLETS, || {
                format!("{} bullets, expected 1-{MAX_BULLETS}", s.bullets.len())
            })
        }),
        ValidationRule::new("bullet_words", "each bullet at most 30 words", |s: &RawSummary| {
            all_of(s.bullets.iter().map(|b| words_within("bullet", b, 1, MAX_BULLET_WORDS)))
        }),
    ]
}

fn generate(target: PostId, source: String, includes_replies: bool, nonce: u32, gateway: &Gateway) -> Result<Summary, PipelineError> {
    let bindings = Bindings::new().with("content", source.as_str());
    let validated = gateway.complete_structured(TemplateId::Summarization, &bindings, &rules(), nonce)?;
    Ok(Summary {
        target_post_id: target,
        bullets: validated.value.bullets.into_iter().map(|b| b.trim().to_string()).collect(),
        includes_replies,
        nonce: validated.nonce,
        source,
    })
}

/// Summarizes `post`; with `include_replies`, `replies` (its reply subtree) is
/// part of the binding.
pub fn summarize_post(post: &Post, replies: &[Post], include_replies: bool, gateway: &Gateway) -> Result<Summary, PipelineError> {
    summarize_post_at(post, replies, include_replies, 0, gateway)
}

/// As [`summarize_post`], starting from a given regeneration nonce.
pub fn summarize_post_at(
    post: &Post,
    replies: &[Post],
    include_replies: bool,
    nonce: u32,
    gateway: &Gateway,
) -> Result<Summary, PipelineError> {
    let source = if include_replies { thread_binding(post, replies)? } else { thread_binding(post, &[])? };
    generate(post.id, source, include_replies, nonce, gateway)
}

pub fn summarize_thread(root: &Post, descendants: &[Post], gateway: &Gateway) -> Result<Summary, PipelineError> {
    summarize_post(root, descendants, true, gateway)
}

/// Fresh bullets for the same source, one nonce further on.
pub fn regenerate(summary: &Summary, gateway: &Gateway) -> Result<Summary, PipelineError> {
    generate(summary.target_post_id, summary.source.clone(), summary.includes_replies, summary.nonce + 1, gateway)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayError, ProviderError, StubScript};
    use crate::model::{MaterialId, Timestamp, UserId, Visibility};
    use serde_json::json;

    fn post(id: u64, parent: Option<u64>, t: u64, content: &str) -> Post {
        Post {
            id: PostId(id),
            author: UserId::new("amy"),
            material_id: MaterialId::new("m"),
            anchor_paragraph: 0,
            content: content.into(),
            visibility: Visibility::Public,
            created_at: Timestamp(t),
            parent: parent.map(PostId),
            merged_from: None,
            archived: false,
            highlight: None,
        }
    }

    fn words(n: usize) -> String {
        vec!["word"; n].join(" ")
    }

    #[test]
    fn accepts_bullets_within_limits() {
        let script = StubScript::new().on(TemplateId::Summarization, [json!({"bullets": [words(12), words(18)]})]);
        let s = summarize_post(&post(1, None, 1, "body"), &[], false, &Gateway::stub(script)).unwrap();
        assert_eq!(s.bullets.len(), 2);
        assert_eq!(s.nonce, 0);
    }

    #[test]
    fn single_bullet_for_short_post() {
        let script = StubScript::new().on(TemplateId::Summarization, [json!({"bullets": ["Trade wars hurt cooperation."]})]);
        let s = summarize_post(&post(1, None, 1, "Trade wars hurt."), &[], false, &Gateway::stub(script)).unwrap();
        assert_eq!(s.bullets, vec!["Trade wars hurt cooperation."]);
    }

    #[test]
    fn four_bullets_fail_after_retries() {
        let four = json!({"bullets": ["a", "b", "c", "d"]});
        let script = StubScript::new().on(TemplateId::Summarization, vec![four; 3]);
        let err = summarize_post(&post(1, None, 1, "x"), &[], false, &Gateway::stub(script)).unwrap_err();
        assert!(matches!(err, PipelineError::Gateway(ref g) if g.failing_rule() == Some("bullet_count")));
    }

    #[test]
    fn thread_binding_contains_every_reply_in_order() {
        let root = post(1, None, 1, "root text");
        let replies = vec![post(4, Some(2), 4, "nested"), post(3, Some(1), 3, "second"), post(2, Some(1), 2, "first")];
        let binding = thread_binding(&root, &replies).unwrap();
        let positions: Vec<usize> = ["root text", "first", "nested", "second"].iter().map(|s| binding.find(s).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{binding}");
    }

    #[test]
    fn thread_without_replies_matches_plain_post() {
        let root = post(1, None, 1, "root text");
        assert_eq!(thread_binding(&root, &[]).unwrap(), {
            let script = StubScript::new().on(TemplateId::Summarization, [json!({"bullets": ["x"]})]);
            summarize_post(&root, &[post(2, Some(1), 2, "ignored")], false, &Gateway::stub(script)).unwrap().source
        });
        let script = StubScript::new().on(TemplateId::Summarization, [json!({"bullets": ["x"]})]);
        let gw = Gateway::stub(script);
        assert_eq!(summarize_thread(&root, &[], &gw).unwrap().source, summarize_post(&root, &[], false, &gw).unwrap().source);
    }

    #[test]
    fn foreign_reply_is_rejected() {
        let root = post(1, None, 1, "root");
        assert!(thread_binding(&root, &[post(5, Some(9), 2, "stray")]).is_err());
    }

    #[test]
    fn regenerate_walks_variants_then_exhausts() {
        let script = StubScript::new().on(TemplateId::Summarization, [json!({"bullets": ["first"]}), json!({"bullets": ["second"]})]);
        let gw = Gateway::stub(script);
        let s0 = summarize_post(&post(1, None, 1, "x"), &[], false, &gw).unwrap();
        let s1 = regenerate(&s0, &gw).unwrap();
        assert_eq!((s1.nonce, s1.bullets.clone()), (1, vec!["second".to_string()]));
        let err = regenerate(&s1, &gw).unwrap_err();
        assert!(matches!(err, PipelineError::Gateway(GatewayError::Provider(ProviderError::Stub(_)))));
    }

    #[test]
    fn one_variant_script_fails_on_regeneration() {
        let script = StubScript::new().on(TemplateId::Summarization, [json!({"bullets": ["only"]})]);
        let gw = Gateway::stub(script);
        let s0 = summarize_post(&post(1, None, 1, "x"), &[], false, &gw).unwrap();
        assert!(regenerate(&s0, &gw).is_err());
    }
}
