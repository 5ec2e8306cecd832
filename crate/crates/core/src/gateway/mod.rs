//! LLM gateway: renders a template, calls the provider, parses the reply into a
//! typed response and checks it against validation rules, retrying on failure.
//!
//! Anything returned from [`Gateway::complete_structured`] has passed every
//! rule it was given, so downstream code can rely on word limits and counts.

mod provider;
mod template;

use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use provider::{
    build_provider, stub_respond, ChatProvider, ChatRequest, HttpTransport, LiveProvider, ProviderConfig,
    ProviderError, ProviderKind, ReqwestTransport, ScriptEntry, SecretRef, StubProvider, StubScript,
};
pub use template::{render_named, render_prompt, Bindings, PromptTemplate, TemplateId, TEMPLATE_VERSION};

use crate::text::word_count;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("unknown template {0}")]
    TemplateNotFound(String),
    #[error("no binding for placeholder {0}")]
    MissingBinding(String),
    #[error("response failed rule {rule_id} after {attempts} attempt(s): {message}")]
    Validation { rule_id: String, message: String, raw: String, attempts: u32 },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

impl GatewayError {
    pub fn failing_rule(&self) -> Option<&str> {
        match self {
            GatewayError::Validation { rule_id, .. } => Some(rule_id),
            _ => None,
        }
    }
}

/// Rule id used when the reply does not parse into the expected shape.
pub const SCHEMA_RULE: &str = "schema";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// Accepted, with a note carried to the caller.
    Warn(String),
    Fail(String),
}

impl Verdict {
    pub fn fail_if(condition: bool, message: impl FnOnce() -> String) -> Verdict {
        if condition {
            Verdict::Fail(message())
        } else {
            Verdict::Pass
        }
    }
}

type Check<'a, T> = Box<dyn Fn(&T) -> Verdict + Send + Sync + 'a>;

/// A named, pure predicate over a parsed response.
pub struct ValidationRule<'a, T> {
    pub rule_id: &'static str,
    pub description: &'static str,
    check: Check<'a, T>,
}

impl<'a, T> ValidationRule<'a, T> {
    pub fn new(
        rule_id: &'static str,
        description: &'static str,
        check: impl Fn(&T) -> Verdict + Send + Sync + 'a,
    ) -> Self {
        Self { rule_id, description, check: Box::new(check) }
    }

    pub fn check(&self, value: &T) -> Verdict {
        (self.check)(value)
    }
}

impl<T> std::fmt::Debug for ValidationRule<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ValidationRule").field("rule_id", &self.rule_id).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleWarning {
    pub rule_id: String,
    pub message: String,
}

/// A response that passed every rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Validated<T> {
    pub value: T,
    pub raw: String,
    /// 1-based attempt that produced `value`.
    pub attempts: u32,
    /// Nonce of the accepted attempt.
    pub nonce: u32,
    pub warnings: Vec<RuleWarning>,
}

/// Pulls the JSON object out of a reply that may be wrapped in a code fence or prose.
pub fn extract_json(raw: &str) -> &str {
    let trimmed = raw.trim();
    match (trimmed.find('{'), trimmed.rfind('}')) {
        (Some(a), Some(b)) if a < b => &trimmed[a..=b],
        _ => trimmed,
    }
}

/// Outcome of checking a single raw reply.
pub fn evaluate<T: DeserializeOwned>(
    raw: &str,
    rules: &[ValidationRule<'_, T>],
) -> Result<(T, Vec<RuleWarning>), (String, String)> {
    let value: T = serde_json::from_str(extract_json(raw)).map_err(|e| (SCHEMA_RULE.to_string(), e.to_string()))?;
    let mut warnings = Vec::new();
    for rule in rules {
        match rule.check(&value) {
            Verdict::Pass => {}
            Verdict::Warn(message) => warnings.push(RuleWarning { rule_id: rule.rule_id.to_string(), message }),
            Verdict::Fail(message) => return Err((rule.rule_id.to_string(), message)),
        }
    }
    Ok((value, warnings))
}

#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    config: ProviderConfig,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("kind", &self.provider.kind()).field("config", &self.config).finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>, config: ProviderConfig) -> Self {
        Self { provider, config }
    }

    /// Stub-backed gateway with default retry settings.
    pub fn stub(script: StubScript) -> Self {
        Self::new(Arc::new(StubProvider::new(script)), ProviderConfig::default())
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn provider_kind(&self) -> ProviderKind {
        self.provider.kind()
    }

    /// Single unvalidated call.
    pub fn complete_raw(&self, template_id: TemplateId, bindings: &Bindings, nonce: u32) -> Result<String, GatewayError> {
        let prompt = render_prompt(template_id, bindings)?;
        Ok(self.provider.complete(&ChatRequest { template_id, prompt, nonce })?)
    }

    /// Calls the provider until a reply parses as `T` and passes `rules`.
    ///
    /// Attempt `i` (0-based) is sent with nonce `nonce + i`. After
    /// `max_retries + 1` failed attempts the error carries the last raw reply and
    /// the rule it failed. Provider errors abort immediately.
    pub fn complete_structured<T: DeserializeOwned>(
        &self,
        template_id: TemplateId,
        bindings: &Bindings,
        rules: &[ValidationRule<'_, T>],
        nonce: u32,
    ) -> Result<Validated<T>, GatewayError> {
        let prompt = render_prompt(template_id, bindings)?;
        let total = self.config.max_retries + 1;
        let mut last = None;
        for attempt in 0..total {
            let request = ChatRequest { template_id, prompt: prompt.clone(), nonce: nonce + attempt };
            let raw = self.provider.complete(&request)?;
            match evaluate(&raw, rules) {
                Ok((value, warnings)) => {
                    return Ok(Validated { value, raw, attempts: attempt + 1, nonce: request.nonce, warnings })
                }
                Err((rule_id, message)) => last = Some((rule_id, message, raw)),
            }
        }
        let (rule_id, message, raw) = last.expect("at least one attempt");
        Err(GatewayError::Validation { rule_id, message, raw, attempts: total })
    }
}

// Reusable checks -----------------------------------------------------------

/// Fails unless `min <= word_count(text) <= max`.
pub fn words_within(label: &str, text: &str, min: usize, max: usize) -> Verdict {
    let n = word_count(text);
    Verdict::fail_if(n < min || n > max, || format!("{label} has {n} words, expected {min}-{max}: {text:?}"))
}

/// Keyword-style label: `preferred_max` words pass, one more is a warning,
/// anything longer fails.
pub fn short_label(label: &str, text: &str, preferred_max: usize) -> Verdict {
    let n = word_count(text);
    if n == 0 {
        Verdict::Fail(format!("{label} is empty"))
    } else if n <= preferred_max {
        Verdict::Pass
    } else if n == preferred_max + 1 {
        Verdict::Warn(format!("{label} {text:?} has {n} words, target is 1-{preferred_max}"))
    } else {
        Verdict::Fail(format!("{label} {text:?} has {n} words, at most {} allowed", preferred_max + 1))
    }
}

/// Combines verdicts: first failure wins, warnings are concatenated.
pub fn all_of(verdicts: impl IntoIterator<Item = Verdict>) -> Verdict {
    let mut warnings = Vec::new();
    for v in verdicts {
        match v {
            Verdict::Pass => {}
            Verdict::Warn(w) => warnings.push(w),
            fail @ Verdict::Fail(_) => return fail,
        }
    }
    if warnings.is_empty() {
        Verdict::Pass
    } else {
        Verdict::Warn(warnings.join("; "))
    }
}
