//! Prompt templates and placeholder rendering.
//!
//! Template bodies live in `templates/*.txt`. Placeholders are written
//! `{{name}}` with `name` in `[a-z0-9_]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GatewayError;

/// Bumped whenever a template body changes.
pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Affinity,
    InspiringQuestion,
    Evidence,
    DiscussionOverview,
    DiscussionAnalysis,
    KeywordHighlighting,
    Summarization,
    AspectExtraction,
}

impl TemplateId {
    pub const ALL: [TemplateId; 8] = [
        TemplateId::Affinity,
        TemplateId::InspiringQuestion,
        TemplateId::Evidence,
        TemplateId::DiscussionOverview,
        TemplateId::DiscussionAnalysis,
        TemplateId::KeywordHighlighting,
        TemplateId::Summarization,
        TemplateId::AspectExtraction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Affinity => "affinity",
            TemplateId::InspiringQuestion => "inspiring_question",
            TemplateId::Evidence => "evidence",
            TemplateId::DiscussionOverview => "discussion_overview",
            TemplateId::DiscussionAnalysis => "discussion_analysis",
            TemplateId::KeywordHighlighting => "keyword_highlighting",
            TemplateId::Summarization => "summarization",
            TemplateId::AspectExtraction => "aspect_extraction",
        }
    }

    pub fn template(self) -> PromptTemplate {
        let body = match self {
            TemplateId::Affinity => include_str!("../../templates/affinity.txt"),
            TemplateId::InspiringQuestion => include_str!("../../templates/inspiring_question.txt"),
            TemplateId::Evidence => include_str!("../../templates/evidence.txt"),
            TemplateId::DiscussionOverview => include_str!("../../templates/discussion_overview.txt"),
            TemplateId::DiscussionAnalysis => include_str!("../../templates/discussion_analysis.txt"),
            TemplateId::KeywordHighlighting => include_str!("../../templates/keyword_highlighting.txt"),
            TemplateId::Summarization => include_str!("../../templates/summarization.txt"),
            TemplateId::AspectExtraction => include_str!("../../templates/aspect_extraction.txt"),
        };
        PromptTemplate { template_id: self, body }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| GatewayError::TemplateNotFound(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: &'static str,
}

impl PromptTemplate {
    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        for (_, name, _) in scan(self.body) {
            if !names.contains(&name) {
                names.push(name);
            }
        }
        names
    }

    pub fn render(&self, bindings: &Bindings) -> Result<String, GatewayError> {
        let mut out = String::with_capacity(self.body.len());
        let mut last = 0;
        for (start, name, end) in scan(self.body) {
            let value = bindings
                .get(name)
                .ok_or_else(|| GatewayError::MissingBinding(name.to_string()))?;
            out.push_str(&self.body[last..start]);
            out.push_str(value);
            last = end;
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

/// `(start, name, end)` for every `{{name}}` in `body`.
fn scan(body: &'static str) -> Vec<(usize, &'static str, usize)> {
    let mut found = Vec::new();
    let mut from = 0;
    while let Some(rel) = body[from..].find("{{") {
        let start = from + rel;
        let Some(close) = body[start + 2..].find("}}") else { break };
        let name = &body[start + 2..start + 2 + close];
        if !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_') {
            let end = start + 2 + close + 2;
            found.push((start, name, end));
            from = end;
        } else {
            from = start + 2;
        }
    }
    found
}

/// Placeholder values for one render.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    pub fn insert(&mut self, name: &str, value: impl Into<String>) {
        self.0.insert(name.to_string(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn remove(&mut self, name: &str) -> Option<String> {
        self.0.remove(name)
    }
}

pub fn render_prompt(template_id: TemplateId, bindings: &Bindings) -> Result<String, GatewayError> {
    template_id.template().render(bindings)
}

/// Renders a template looked up by its string id.
pub fn render_named(template_id: &str, bindings: &Bindings) -> Result<String, GatewayError> {
    render_prompt(template_id.parse()?, bindings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind_all(id: TemplateId) -> Bindings {
        id.template()
            .placeholders()
            .into_iter()
            .fold(Bindings::new(), |b, name| b.with(name, format!("<{name} value>")))
    }

    #[test]
    fn every_template_renders_fully() {
        for id in TemplateId::ALL {
            let out = render_prompt(id, &bind_all(id)).unwrap();
            assert!(!out.contains("{{"), "{id} left a placeholder");
            assert!(!id.template().placeholders().is_empty());
        }
    }

    #[test]
    fn affinity_includes_all_cards() {
        let candidates = "[id 2] Amy on the prisoner's dilemma\n[id 3] Ben on carbon taxes\n[id 4] Cy on treaties";
        let b = Bindings::new()
            .with("primary_id", "1")
            .with("primary", "Alex on economic nationalism")
            .with("candidates", candidates);
        let out = render_prompt(TemplateId::Affinity, &b).unwrap();
        for needle in ["Alex on economic nationalism", "Amy on the prisoner's dilemma", "Ben on carbon taxes", "Cy on treaties"] {
            assert!(out.contains(needle));
        }
        assert!(out.starts_with("Analyze the relationship between a primary discussion card"));
    }

    #[test]
    fn missing_binding_is_named() {
        let err = render_prompt(TemplateId::Summarization, &Bindings::new()).unwrap_err();
        assert!(matches!(err, GatewayError::MissingBinding(ref n) if n == "content"));
    }

    #[test]
    fn highlighting_includes_both_posts() {
        let b = Bindings::new().with("card1", "first body").with("card2", "second body");
        let out = render_prompt(TemplateId::KeywordHighlighting, &b).unwrap();
        assert!(out.contains("first body") && out.contains("second body"));
    }

    #[test]
    fn unknown_template_is_not_found() {
        assert!(matches!(render_named("poetry", &Bindings::new()), Err(GatewayError::TemplateNotFound(_))));
        assert!(render_named("summarization", &Bindings::new().with("content", "x")).is_ok());
    }

    #[test]
    fn json_braces_are_not_placeholders() {
        let names = TemplateId::KeywordHighlighting.template().placeholders();
        assert_eq!(names, vec!["card1", "card2"]);
    }

    #[test]
    fn binding_values_are_not_re_expanded() {
        let b = Bindings::new().with("content", "literal {{card1}}");
        let out = render_prompt(TemplateId::Summarization, &b).unwrap();
        assert!(out.contains("literal {{card1}}"));
    }
}
