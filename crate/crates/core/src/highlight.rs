//! Multi-framework keyword highlighting for a pair of posts.

use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::gateway::{all_of, words_within, Bindings, Gateway, TemplateId, ValidationRule, Verdict};
use crate::model::{DiscussionStyle, Post, PostId};
use crate::text::is_verbatim;

/// How far fractional percentages may sum from 100 and still be rounded.
pub const SUM_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleDistribution {
    pub similarity_pct: u32,
    pub contrastive_pct: u32,
    pub complementary_pct: u32,
}

impl StyleDistribution {
    pub fn new(similarity: u32, contrastive: u32, complementary: u32) -> Result<Self, PipelineError> {
        if similarity + contrastive + complementary != 100 {
            return Err(PipelineError::Domain(format!(
                "style percentages {similarity}+{contrastive}+{complementary} do not total 100"
            )));
        }
        Ok(Self { similarity_pct: similarity, contrastive_pct: contrastive, complementary_pct: complementary })
    }

    /// Rounds percentages that total 100 (within [`SUM_TOLERANCE`]) to integers
    /// with the largest-remainder method; ties go to the earlier style.
    pub fn from_fractional(raw: [f64; 3]) -> Result<Self, PipelineError> {
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PipelineError::Domain(format!("invalid percentages {raw:?}")));
        }
        let sum: f64 = raw.iter().sum();
        if (sum - 100.0).abs() > SUM_TOLERANCE {
            return Err(PipelineError::Domain(format!("percentages total {sum}, not 100")));
        }
        let scaled: Vec<f64> = raw.iter().map(|v| v * 100.0 / sum).collect();
        let mut ints: Vec<u32> = scaled.iter().map(|v| v.floor() as u32).collect();
        let short = 100 - ints.iter().sum::<u32>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = scaled[a] - scaled[a].floor();
            let rb = scaled[b] - scaled[b].floor();
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        for &i in order.iter().take(short as usize) {
            ints[i] += 1;
        }
        Self::new(ints[0], ints[1], ints[2])
    }

    pub fn get(&self, style: DiscussionStyle) -> u32 {
        match style {
            DiscussionStyle::Similarity => self.similarity_pct,
            DiscussionStyle::Contrastive => self.contrastive_pct,
            DiscussionStyle::Complementary => self.complementary_pct,
        }
    }

    pub fn total(&self) -> u32 {
        self.similarity_pct + self.contrastive_pct + self.complementary_pct
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordHighlight {
    pub style: DiscussionStyle,
    /// 1-3 words copied from post A.
    pub quote_a: String,
    /// 1-3 words copied from post B.
    pub quote_b: String,
    pub aspect: String,
}

impl KeywordHighlight {
    pub fn color(&self) -> &'static str {
        self.style.color()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairAnalysis {
    pub post_a_id: PostId,
    pub post_b_id: PostId,
    pub distribution: StyleDistribution,
    pub highlights: Vec<KeywordHighlight>,
}

#[derive(Debug, Clone, Deserialize)]
struct RawDistribution {
    similarity: f64,
    contrastive: f64,
    complementary: f64,
}

impl RawDistribution {
    fn as_array(&self) -> [f64; 3] {
        [self.similarity, self.contrastive, self.complementary]
    }

    fn get(&self, style: DiscussionStyle) -> f64 {
        match style {
            DiscussionStyle::Similarity => self.similarity,
            DiscussionStyle::Contrastive => self.contrastive,
            DiscussionStyle::Complementary => self.complementary,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct RawHighlight {
    style: DiscussionStyle,
    #[serde(alias = "quote_a")]
    quote_card1: String,
    #[serde(alias = "quote_b")]
    quote_card2: String,
    aspect: String,
}

#[derive(Debug, Clone, Deserialize)]
struct RawPair {
    distribution: RawDistribution,
    #[serde(default)]
    highlights: Vec<RawHighlight>,
}

fn rules<'a>(a: &'a Post, b: &'a Post) -> Vec<ValidationRule<'a, RawPair>> {
    vec![
        ValidationRule::new("distribution_total", "percentages total 100", |r: &RawPair| {
            let raw = r.distribution.as_array();
            let sum: f64 = raw.iter().sum();
            Verdict::fail_if(
                raw.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 100.0).abs() > SUM_TOLERANCE,
                || format!("percentages {raw:?} total {sum}"),
            )
        }),
        ValidationRule::new("quote_words", "quotes are 1-3 words", |r: &RawPair| {
            all_of(r.highlights.iter().flat_map(|h| {
                [words_within("quote from card1", &h.quote_card1, 1, 3), words_within("quote from card2", &h.quote_card2, 1, 3)]
            }))
        }),
        ValidationRule::new("quote_verbatim", "quotes occur verbatim in their post", move |r: &RawPair| {
            all_of(r.highlights.iter().flat_map(|h| {
                [
                    Verdict::fail_if(!is_verbatim(&a.content, &h.quote_card1), || {
                        format!("{:?} is not in card1", h.quote_card1)
                    }),
                    Verdict::fail_if(!is_verbatim(&b.content, &h.quote_card2), || {
                        format!("{:?} is not in card2", h.quote_card2)
                    }),
                ]
            }))
        }),
        ValidationRule::new("aspect_words", "aspects are 1-10 words", |r: &RawPair| {
            all_of(r.highlights.iter().map(|h| words_within("aspect", &h.aspect, 1, 10)))
        }),
        ValidationRule::new("style_coverage", "non-zero styles have highlights, zero styles none", |r: &RawPair| {
            all_of(DiscussionStyle::ALL.into_iter().map(|style| {
                let pct = r.distribution.get(style);
                let n = r.highlights.iter().filter(|h| h.style == style).count();
                Verdict::fail_if((pct > 0.0) != (n > 0), || format!("{style} has {pct}% and {n} highlight(s)"))
            }))
        }),
    ]
}

/// Analyzes `post_a` against `post_b` under the three discussion styles.
/// Only top-level content is considered; replies are not part of the input.
pub fn analyze_pair(post_a: &Post, post_b: &Post, gateway: &Gateway) -> Result<PairAnalysis, PipelineError> {
    if post_a.id == post_b.id {
        return Err(PipelineError::Domain("cannot analyze a post against itself".into()));
    }
    if post_a.material_id != post_b.material_id {
        return Err(PipelineError::Domain("posts belong to different materials".into()));
    }
    let bindings = Bindings::new().with("card1", post_a.content.as_str()).with("card2", post_b.content.as_str());
    let validated = gateway.complete_structured(TemplateId::KeywordHighlighting, &bindings, &rules(post_a, post_b), 0)?;
    let raw = validated.value;
    let distribution = StyleDistribution::from_fractional(raw.distribution.as_array())?;
    let highlights = raw
        .highlights
        .into_iter()
        .filter(|h| distribution.get(h.style) > 0)
        .map(|h| KeywordHighlight {
            style: h.style,
            quote_a: h.quote_card1.trim().to_string(),
            quote_b: h.quote_card2.trim().to_string(),
            aspect: h.aspect.trim().to_string(),
        })
        .collect();
    Ok(PairAnalysis { post_a_id: post_a.id, post_b_id: post_b.id, distribution, highlights })
}
