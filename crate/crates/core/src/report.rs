//! Personalized learning report: class hot spots, the reader's own engagement
//! map, who they discussed with, and the questions they generated.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blend::{BlendSelection, InspiringQuestion};
use crate::error::PipelineError;
use crate::gateway::{all_of, words_within, Bindings, Gateway, TemplateId, ValidationRule, Verdict};
use crate::model::{BlendStage, EngagementEvent, EventKind, Material, MaterialId, Post, PostId, Timestamp, UserId};

pub const MAX_HOT_SPOTS: usize = 5;
pub const MAX_REFLECTION_WORDS: usize = 30;
pub const SUMMARY_PREFIX: &str = "You discussed";
pub const SUGGESTION_PREFIX: &str = "You could";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    /// Minimum public posts on a paragraph to make it a hot spot.
    pub hot_spot_min_posts: usize,
    /// Weight of a view event in the engagement score.
    pub view_weight: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { hot_spot_min_posts: 2, view_weight: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HotSpot {
    pub paragraph_index: usize,
    pub keyword: String,
    pub class_post_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagedParagraph {
    pub paragraph_index: usize,
    pub theme: String,
    pub keywords: Vec<String>,
    pub comment_refs: Vec<PostId>,
    pub summary: String,
    pub suggestion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ReadingReflection {
    pub engaged: Vec<EngagedParagraph>,
    pub underexplored: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerSlice {
    pub peer: UserId,
    pub interaction_count: usize,
    pub share_pct: f64,
    pub summary: String,
    pub suggestion: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question: InspiringQuestion,
    pub selection: BlendSelection,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningReport {
    pub user: UserId,
    pub material_id: MaterialId,
    pub hot_spots: Vec<HotSpot>,
    pub reflection: ReadingReflection,
    pub peer_slices: Vec<PeerSlice>,
    pub question_history: Vec<QuestionRecord>,
    pub generated_at: Timestamp,
}

// Hot spots ------------------------------------------------------------------

/// Public, non-archived posts and replies per paragraph.
pub fn class_post_counts(public_posts: &[Post], material: &Material) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for p in public_posts.iter().filter(|p| p.material_id == material.id && !p.archived) {
        *counts.entry(p.anchor_paragraph).or_insert(0) += 1;
    }
    counts
}

/// Paragraphs at or above the threshold, busiest first, ties by index, capped at five.
pub fn rank_hot_spots(counts: &BTreeMap<usize, usize>, min_posts: usize) -> Vec<(usize, usize)> {
    let mut ranked: Vec<(usize, usize)> = counts.iter().filter(|(_, &n)| n >= min_posts.max(1)).map(|(&p, &n)| (p, n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(MAX_HOT_SPOTS);
    ranked
}

#[derive(Debug, Deserialize)]
struct RawOverview {
    #[serde(default)]
    hot_spots: Vec<RawHotSpot>,
}

#[derive(Debug, Deserialize)]
struct RawHotSpot {
    paragraph_index: usize,
    keyword: String,
}

fn discussions_binding(posts: &[&Post]) -> String {
    let list: Vec<_> = posts
        .iter()
        .map(|p| serde_json::json!({"paragraph_index": p.anchor_paragraph, "author": p.author.as_str(), "content": p.content}))
        .collect();
    serde_json::to_string_pretty(&list).expect("posts serialize")
}

pub fn compute_hot_spots(
    public_posts: &[Post],
    user_posts: &[Post],
    material: &Material,
    config: &ReportConfig,
    gateway: &Gateway,
) -> Result<Vec<HotSpot>, PipelineError> {
    let ranked = rank_hot_spots(&class_post_counts(public_posts, material), config.hot_spot_min_posts);
    if ranked.is_empty() {
        return Ok(Vec::new());
    }
    let public: Vec<&Post> = public_posts.iter().filter(|p| p.material_id == material.id && !p.archived).collect();
    let own: Vec<&Post> = user_posts.iter().filter(|p| !p.archived).collect();
    let hot_list = ranked.iter().map(|(p, n)| format!("{p}: {n}")).collect::<Vec<_>>().join("\n");
    let bindings = Bindings::new()
        .with("article", material.raw_text.as_str())
        .with("discussions", discussions_binding(&public))
        .with("user_comments", discussions_binding(&own))
        .with("hot_spots", hot_list);
    let wanted: Vec<usize> = ranked.iter().map(|(p, _)| *p).collect();
    let rules = vec![
        ValidationRule::new("hot_spot_coverage", "one keyword per hot spot", |r: &RawOverview| {
            all_of(wanted.iter().map(|p| {
                Verdict::fail_if(!r.hot_spots.iter().any(|h| h.paragraph_index == *p), || format!("no keyword for paragraph {p}"))
            }))
        }),
        ValidationRule::new("hot_spot_keyword", "hot-spot keywords are 1-2 words", |r: &RawOverview| {
            all_of(
                r.hot_spots
                    .iter()
                    .filter(|h| wanted.contains(&h.paragraph_index))
                    .map(|h| words_within("hot-spot keyword", &h.keyword, 1, 2)),
            )
        }),
    ];
    let overview = gateway.complete_structured(TemplateId::DiscussionOverview, &bindings, &rules, 0)?.value;
    Ok(ranked
        .into_iter()
        .map(|(paragraph_index, class_post_count)| {
            let keyword = overview
                .hot_spots
                .iter()
                .find(|h| h.paragraph_index == paragraph_index)
                .map(|h| h.keyword.trim().to_string())
                .unwrap_or_default();
            HotSpot { paragraph_index, keyword, class_post_count }
        })
        .collect())
}

// Reflection -----------------------------------------------------------------

/// Blend flows log several stages; only the question step counts as engagement.
fn counts_as_blend(e: &EngagementEvent) -> bool {
    e.kind == EventKind::Blend && matches!(e.stage, None | Some(BlendStage::Question))
}

/// Engagement score per paragraph: posts, replies and blends, plus weighted views.
pub fn engagement_scores(events: &[EngagementEvent], material: &Material, config: &ReportConfig) -> Vec<f64> {
    let mut scores = vec![0.0; material.len()];
    for e in events.iter().filter(|e| e.material_id == material.id) {
        let Some(p) = e.paragraph.filter(|p| *p < scores.len()) else { continue };
        let w = match e.kind {
            EventKind::Post | EventKind::Reply => 1.0,
            EventKind::Blend if counts_as_blend(e) => 1.0,
            EventKind::View => config.view_weight,
            _ => 0.0,
        };
        scores[p] += w;
    }
    scores
}

#[derive(Debug, Deserialize)]
struct RawAnalysis {
    #[serde(default)]
    keywords: Vec<String>,
    summary: String,
    suggestion: String,
}

fn analysis_rules<'a>() -> Vec<ValidationRule<'a, RawAnalysis>> {
    fn opener(label: &str, text: &str, prefix: &str) -> Verdict {
        all_of([
            Verdict::fail_if(!text.trim_start().starts_with(prefix), || format!("{label} must start with {prefix:?}")),
            words_within(label, text, 1, MAX_REFLECTION_WORDS),
        ])
    }
    vec![
        ValidationRule::new("analysis_keywords", "1-3 keywords of 1-2 words", |r: &RawAnalysis| {
            all_of(
                std::iter::once(Verdict::fail_if(r.keywords.is_empty() || r.keywords.len() > 3, || {
                    format!("{} keywords, expected 1-3", r.keywords.len())
                }))
                .chain(r.keywords.iter().map(|k| words_within("keyword", k, 1, 2))),
            )
        }),
        ValidationRule::new("analysis_summary", "summary opens with 'You discussed', at most 30 words", |r: &RawAnalysis| {
            opener("summary", &r.summary, SUMMARY_PREFIX)
        }),
        ValidationRule::new("analysis_suggestion", "suggestion opens with 'You could', at most 30 words", |r: &RawAnalysis| {
            opener("suggestion", &r.suggestion, SUGGESTION_PREFIX)
        }),
    ]
}

fn analyze(index: &str, paragraph: &str, comments: String, gateway: &Gateway) -> Result<RawAnalysis, PipelineError> {
    let bindings = Bindings::new().with("paragraph_index", index).with("paragraph", paragraph).with("comments", comments);
    let mut v = gateway.complete_structured(TemplateId::DiscussionAnalysis, &bindings, &analysis_rules(), 0)?.value;
    v.keywords = v.keywords.iter().map(|k| k.trim().to_string()).collect();
    v.summary = v.summary.trim().to_string();
    v.suggestion = v.suggestion.trim().to_string();
    Ok(v)
}

pub fn compute_reading_reflection(
    user_events: &[EngagementEvent],
    user_posts: &[Post],
    material: &Material,
    config: &ReportConfig,
    gateway: &Gateway,
) -> Result<ReadingReflection, PipelineError> {
    if let Some(e) = user_events.iter().find(|e| e.material_id != material.id) {
        return Err(PipelineError::Domain(format!("event for material {} in a report on {}", e.material_id, material.id)));
    }
    if user_events.windows(2).any(|w| w[0].user != w[1].user) {
        return Err(PipelineError::Domain("events belong to more than one user".into()));
    }
    let scores = engagement_scores(user_events, material, config);
    let mut reflection = ReadingReflection::default();
    for (index, score) in scores.iter().enumerate() {
        if *score < 1.0 {
            // Any engagement at all keeps a paragraph out of the underexplored list.
            if *score == 0.0 {
                reflection.underexplored.push(index);
            }
            continue;
        }
        let mine: Vec<&Post> = user_posts.iter().filter(|p| p.anchor_paragraph == index && !p.archived).collect();
        let comments = if mine.is_empty() {
            "(no written comments; engaged through blending)".to_string()
        } else {
            mine.iter().map(|p| format!("- {}", p.content)).collect::<Vec<_>>().join("\n")
        };
        let paragraph = material.paragraph(index).map(|p| p.text.as_str()).unwrap_or_default();
        let a = analyze(&index.to_string(), paragraph, comments, gateway)?;
        reflection.engaged.push(EngagedParagraph {
            paragraph_index: index,
            theme: a.keywords[0].clone(),
            keywords: a.keywords,
            comment_refs: mine.iter().map(|p| p.id).collect(),
            summary: a.summary,
            suggestion: a.suggestion,
        });
    }
    Ok(reflection)
}

// Peers ----------------------------------------------------------------------

/// Interactions per peer, most first, ties by peer name.
pub fn peer_counts(user: &UserId, interactions: &[EngagementEvent]) -> Vec<(UserId, usize)> {
    let mut counts: HashMap<&UserId, usize> = HashMap::new();
    for e in interactions {
        let relevant = match e.kind {
            EventKind::Reply | EventKind::PairAnalysis => true,
            EventKind::Blend => counts_as_blend(e),
            _ => false,
        };
        if let (true, Some(peer)) = (relevant && &e.user == user, e.peer.as_ref()) {
            if peer != user {
                *counts.entry(peer).or_insert(0) += 1;
            }
        }
    }
    let mut out: Vec<(UserId, usize)> = counts.into_iter().map(|(p, n)| (p.clone(), n)).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Shares in percent; they sum to 100 up to float rounding.
pub fn shares(counts: &[(UserId, usize)]) -> Vec<f64> {
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    counts.iter().map(|(_, n)| *n as f64 * 100.0 / total as f64).collect()
}

pub fn compute_peer_distribution(
    user: &UserId,
    interactions: &[EngagementEvent],
    posts: &[Post],
    gateway: &Gateway,
) -> Result<Vec<PeerSlice>, PipelineError> {
    let counts = peer_counts(user, interactions);
    let shares = shares(&counts);
    let by_id: HashMap<PostId, &Post> = posts.iter().map(|p| (p.id, p)).collect();
    let mut slices = Vec::with_capacity(counts.len());
    for ((peer, count), share_pct) in counts.into_iter().zip(shares) {
        // The user's replies to this peer, and the peer's posts.
        let exchanged: Vec<String> = posts
            .iter()
            .filter(|p| !p.archived)
            .filter_map(|p| {
                let parent_author = p.parent.and_then(|id| by_id.get(&id)).map(|q| &q.author);
                if &p.author == user && parent_author == Some(&peer) {
                    Some(format!("- (you, replying to {peer}) {}", p.content))
                } else if p.author == peer {
                    Some(format!("- ({peer}) {}", p.content))
                } else {
                    None
                }
            })
            .collect();
        let comments = if exchanged.is_empty() { format!("({count} interactions with {peer})") } else { exchanged.join("\n") };
        let a = analyze("all", &format!("Discussion between {user} and {peer}"), comments, gateway)?;
        slices.push(PeerSlice { peer, interaction_count: count, share_pct, summary: a.summary, suggestion: a.suggestion, keywords: a.keywords });
    }
    Ok(slices)
}

// Assembly -------------------------------------------------------------------

/// Read-only snapshot the report is computed from.
#[derive(Debug, Clone)]
pub struct ReportInputs<'a> {
    pub user: &'a UserId,
    pub material: &'a Material,
    /// Everyone's public posts on the material.
    pub public_posts: &'a [Post],
    /// The user's own posts, any visibility.
    pub user_posts: &'a [Post],
    /// The user's engagement events on the material.
    pub events: &'a [EngagementEvent],
    pub questions: &'a [QuestionRecord],
    pub now: Timestamp,
}

pub fn assemble_report(inputs: &ReportInputs<'_>, config: &ReportConfig, gateway: &Gateway) -> Result<LearningReport, PipelineError> {
    let hot_spots = compute_hot_spots(inputs.public_posts, inputs.user_posts, inputs.material, config, gateway)?;
    let reflection = compute_reading_reflection(inputs.events, inputs.user_posts, inputs.material, config, gateway)?;
    let mut known: Vec<Post> = inputs.public_posts.to_vec();
    known.extend(inputs.user_posts.iter().filter(|p| !inputs.public_posts.iter().any(|q| q.id == p.id)).cloned());
    let peer_slices = compute_peer_distribution(inputs.user, inputs.events, &known, gateway)?;
    let mut question_history = inputs.questions.to_vec();
    question_history.sort_by(|a, b| b.created_at.cmp(&a.created_at));
    Ok(LearningReport {
        user: inputs.user.clone(),
        material_id: inputs.material.id.clone(),
        hot_spots,
        reflection,
        peer_slices,
        question_history,
        generated_at: inputs.now,
    })
}

/// Printable markdown version of a report.
pub fn render_markdown(report: &LearningReport, material: &Material) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Learning report: {}\n", material.title);
    let _ = writeln!(out, "Student: {}  \nGenerated at: {}\n", report.user, report.generated_at.0);

    let _ = writeln!(out, "## Discussion hot spots\n");
    if report.hot_spots.is_empty() {
        let _ = writeln!(out, "No paragraph has drawn enough discussion yet.\n");
    }
    for h in &report.hot_spots {
        let _ = writeln!(out, "- Paragraph {} ({}): {} posts", h.paragraph_index, h.keyword, h.class_post_count);
    }

    let _ = writeln!(out, "\n## Your reading\n");
    for e in &report.reflection.engaged {
        let _ = writeln!(out, "### Paragraph {}: {}\n", e.paragraph_index, e.theme);
        let _ = writeln!(out, "{}\n\n> {}\n", e.summary, e.suggestion);
    }
    if report.reflection.underexplored.is_empty() {
        let _ = writeln!(out, "You engaged with every paragraph.");
    } else {
        let list: Vec<String> = report.reflection.underexplored.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(out, "Underexplored paragraphs: {}", list.join(", "));
    }

    let _ = writeln!(out, "\n## Classmates\n");
    if report.peer_slices.is_empty() {
        let _ = writeln!(out, "No interactions with classmates yet.");
    }
    for s in &report.peer_slices {
        let _ = writeln!(out, "- **{}**: {} interactions ({:.1}%) [{}]", s.peer, s.interaction_count, s.share_pct, s.keywords.join(", "));
        let _ = writeln!(out, "  - {}\n  - {}", s.summary, s.suggestion);
    }

    let _ = writeln!(out, "\n## Inspiring questions\n");
    if report.question_history.is_empty() {
        let _ = writeln!(out, "No questions generated yet.");
    }
    for q in &report.question_history {
        let _ = writeln!(out, "- ({}) {}", q.question.style, q.question.text);
    }
    out
}
