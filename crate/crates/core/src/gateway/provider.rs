//! Chat-completion providers: a scripted stub for offline runs and an HTTP
//! adapter for a live, chat-completions style endpoint.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::template::TemplateId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("unexpected provider response: {0}")]
    Malformed(String),
    #[error("stub: {0}")]
    Stub(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Stub,
    Live,
}

/// Name of the environment variable holding a credential. The secret itself is
/// never stored in configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SecretRef(pub String);

impl SecretRef {
    pub fn resolve(&self) -> Result<String, ProviderError> {
        std::env::var(&self.0).map_err(|_| ProviderError::Config(format!("credential variable {} is not set", self.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    #[serde(default)]
    pub provider_kind: ProviderKind,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub credential: Option<SecretRef>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Passed through to the live request body untouched (temperature and the like).
    #[serde(default)]
    pub options: serde_json::Map<String, Value>,
}

fn default_model() -> String {
    "stub".to_string()
}

fn default_max_retries() -> u32 {
    2
}

fn default_timeout_secs() -> u64 {
    30
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            provider_kind: ProviderKind::Stub,
            model_name: default_model(),
            endpoint: None,
            credential: None,
            max_retries: default_max_retries(),
            timeout_secs: default_timeout_secs(),
            options: Default::default(),
        }
    }
}

impl ProviderConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.provider_kind == ProviderKind::Live {
            if self.endpoint.as_deref().unwrap_or("").is_empty() {
                return Err(ProviderError::Config("live provider needs an endpoint".into()));
            }
            if self.credential.is_none() {
                return Err(ProviderError::Config("live provider needs a credential".into()));
            }
        }
        Ok(())
    }

    /// Reads `MARGIN_PROVIDER`, `MARGIN_MODEL`, `MARGIN_ENDPOINT`,
    /// `MARGIN_CREDENTIAL_ENV`, `MARGIN_MAX_RETRIES` and `MARGIN_TIMEOUT_SECS`.
    pub fn from_env() -> Result<Self, ProviderError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ProviderError> {
        let mut config = Self::default();
        if let Some(kind) = get("MARGIN_PROVIDER") {
            config.provider_kind = match kind.as_str() {
                "stub" => ProviderKind::Stub,
                "live" => ProviderKind::Live,
                other => return Err(ProviderError::Config(format!("unknown provider kind {other}"))),
            };
        }
        if let Some(model) = get("MARGIN_MODEL") {
            config.model_name = model;
        }
        config.endpoint = get("MARGIN_ENDPOINT");
        config.credential = get("MARGIN_CREDENTIAL_ENV").map(SecretRef);
        if let Some(n) = get("MARGIN_MAX_RETRIES") {
            config.max_retries = n.parse().map_err(|_| ProviderError::Config(format!("bad MARGIN_MAX_RETRIES {n}")))?;
        }
        if let Some(n) = get("MARGIN_TIMEOUT_SECS") {
            config.timeout_secs = n.parse().map_err(|_| ProviderError::Config(format!("bad MARGIN_TIMEOUT_SECS {n}")))?;
        }
        config.validate()?;
        Ok(config)
    }
}

/// One provider call. `nonce` counts regenerations and retries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub template_id: TemplateId,
    pub prompt: String,
    pub nonce: u32,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;

    fn kind(&self) -> ProviderKind;
}

// ---------------------------------------------------------------------------
// Stub

/// Scripted responses keyed by template.
///
/// The first entry whose template matches, and whose `when_contains` (if set)
/// occurs in the prompt, answers the call. The request nonce picks the variant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StubScript {
    pub entries: Vec<ScriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub template: TemplateId,
    #[serde(default)]
    pub when_contains: Option<String>,
    /// Strings are returned as-is; any other JSON value is returned serialized.
    pub responses: Vec<Value>,
}

impl StubScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on(mut self, template: TemplateId, responses: impl IntoIterator<Item = Value>) -> Self {
        self.entries.push(ScriptEntry { template, when_contains: None, responses: responses.into_iter().collect() });
        self
    }

    pub fn on_matching(
        mut self,
        template: TemplateId,
        needle: impl Into<String>,
        responses: impl IntoIterator<Item = Value>,
    ) -> Self {
        self.entries.push(ScriptEntry {
            template,
            when_contains: Some(needle.into()),
            responses: responses.into_iter().collect(),
        });
        self
    }

    pub fn push(&mut self, entry: ScriptEntry) {
        self.entries.push(entry);
    }
}

pub fn stub_respond(request: &ChatRequest, script: &StubScript) -> Result<String, ProviderError> {
    let entry = script
        .entries
        .iter()
        .find(|e| {
            e.template == request.template_id
                && e.when_contains.as_deref().is_none_or(|needle| request.prompt.contains(needle))
        })
        .ok_or_else(|| ProviderError::Stub(format!("no scripted response for template {}", request.template_id)))?;
    let variant = entry.responses.get(request.nonce as usize).ok_or_else(|| {
        ProviderError::Stub(format!(
            "script for {} has {} variant(s), nonce {} requested",
            request.template_id,
            entry.responses.len(),
            request.nonce
        ))
    })?;
    Ok(match variant {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    })
}

#[derive(Debug, Default)]
pub struct StubProvider {
    script: StubScript,
    calls: AtomicUsize,
}

impl StubProvider {
    pub fn new(script: StubScript) -> Self {
        Self { script, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ChatProvider for StubProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        stub_respond(request, &self.script)
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Stub
    }
}

// ---------------------------------------------------------------------------
// Live

pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value, timeout: Duration) -> Result<Value, ProviderError>;
}

#[derive(Debug, Default)]
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value, timeout: Duration) -> Result<Value, ProviderError> {
        let mut request = self.client.post(url).timeout(timeout).json(body);
        if let Some(token) = bearer {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout(timeout)
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(ProviderError::Transport(format!("HTTP {status}: {text}")));
        }
        response.json().map_err(|e| ProviderError::Malformed(e.to_string()))
    }
}

/// Chat-completions adapter. The only code that knows the vendor request shape.
pub struct LiveProvider {
    config: ProviderConfig,
    transport: Arc<dyn HttpTransport>,
}

impl LiveProvider {
    pub fn new(config: ProviderConfig, transport: Arc<dyn HttpTransport>) -> Result<Self, ProviderError> {
        config.validate()?;
        Ok(Self { config, transport })
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let mut content = request.prompt.clone();
        if request.nonce > 0 {
            content.push_str(&format!("\n\nRegeneration request #{}: produce a fresh response.", request.nonce));
        }
        let mut body = json!({
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": "Reply with a single JSON object and nothing else."},
                {"role": "user", "content": content},
            ],
        });
        if let Value::Object(map) = &mut body {
            for (k, v) in &self.config.options {
                map.insert(k.clone(), v.clone());
            }
        }
        body
    }
}

impl ChatProvider for LiveProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let secret = match &self.config.credential {
            Some(r) => Some(r.resolve()?),
            None => None,
        };
        let reply = self
            .transport
            .post_json(endpoint, secret.as_deref(), &self.request_body(request), self.config.timeout())?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Live
    }
}

/// Builds the provider named by `config`. The transport is only used for live providers.
pub fn build_provider(
    config: &ProviderConfig,
    script: StubScript,
    transport: Arc<dyn HttpTransport>,
) -> Result<Arc<dyn ChatProvider>, ProviderError> {
    config.validate()?;
    Ok(match config.provider_kind {
        ProviderKind::Stub => Arc::new(StubProvider::new(script)),
        ProviderKind::Live => Arc::new(LiveProvider::new(config.clone(), transport)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn req(template_id: TemplateId, prompt: &str, nonce: u32) -> ChatRequest {
        ChatRequest { template_id, prompt: prompt.into(), nonce }
    }

    #[test]
    fn stub_is_deterministic() {
        let script = StubScript::new().on(TemplateId::Summarization, [json!({"bullets": ["a"]}), json!("second")]);
        let r = req(TemplateId::Summarization, "p", 0);
        assert_eq!(stub_respond(&r, &script).unwrap(), stub_respond(&r, &script).unwrap());
        assert_eq!(stub_respond(&req(TemplateId::Summarization, "p", 1), &script).unwrap(), "second");
    }

    #[test]
    fn stub_errors_on_unscripted_template_or_exhaustion() {
        let script = StubScript::new().on(TemplateId::Summarization, [json!("only")]);
        assert!(matches!(stub_respond(&req(TemplateId::Affinity, "p", 0), &script), Err(ProviderError::Stub(_))));
        assert!(matches!(stub_respond(&req(TemplateId::Summarization, "p", 1), &script), Err(ProviderError::Stub(_))));
    }

    #[test]
    fn stub_matches_first_applicable_entry() {
        let script = StubScript::new()
            .on_matching(TemplateId::Summarization, "Amy", [json!("amy")])
            .on(TemplateId::Summarization, [json!("anyone")]);
        assert_eq!(stub_respond(&req(TemplateId::Summarization, "about Amy", 0), &script).unwrap(), "amy");
        assert_eq!(stub_respond(&req(TemplateId::Summarization, "about Ben", 0), &script).unwrap(), "anyone");
    }

    #[test]
    fn env_config_defaults_and_validation() {
        let c = ProviderConfig::from_lookup(|_| None).unwrap();
        assert_eq!(c.provider_kind, ProviderKind::Stub);
        assert_eq!(c.max_retries, 2);
        assert_eq!(c.timeout(), Duration::from_secs(30));
        assert!(c.credential.is_none());

        let live_missing = ProviderConfig::from_lookup(|k| (k == "MARGIN_PROVIDER").then(|| "live".to_string()));
        assert!(matches!(live_missing, Err(ProviderError::Config(_))));
    }

    struct RecordingTransport {
        bodies: Mutex<Vec<Value>>,
    }

    impl HttpTransport for RecordingTransport {
        fn post_json(&self, _url: &str, bearer: Option<&str>, body: &Value, _t: Duration) -> Result<Value, ProviderError> {
            assert_eq!(bearer, Some("sk-test"));
            self.bodies.lock().unwrap().push(body.clone());
            Ok(json!({"choices": [{"message": {"content": "{\"ok\": true}"}}]}))
        }
    }

    #[test]
    fn live_provider_shapes_request_and_reads_reply() {
        std::env::set_var("MARGIN_TEST_LIVE_KEY", "sk-test");
        let mut config = ProviderConfig {
            provider_kind: ProviderKind::Live,
            model_name: "some-model".into(),
            endpoint: Some("http://localhost:9/v1/chat/completions".into()),
            credential: Some(SecretRef("MARGIN_TEST_LIVE_KEY".into())),
            ..ProviderConfig::default()
        };
        config.options.insert("temperature".into(), json!(0.2));
        let transport = Arc::new(RecordingTransport { bodies: Mutex::new(vec![]) });
        let provider = LiveProvider::new(config, transport.clone()).unwrap();
        let out = provider.complete(&req(TemplateId::Summarization, "hello", 2)).unwrap();
        assert_eq!(out, "{\"ok\": true}");
        let bodies = transport.bodies.lock().unwrap();
        assert_eq!(bodies[0]["model"], "some-model");
        assert_eq!(bodies[0]["temperature"], 0.2);
        let content = bodies[0]["messages"][1]["content"].as_str().unwrap();
        assert!(content.starts_with("hello") && content.contains("#2"));
    }
}
