//! Assembles a [`Forum`] from environment variables.
//!
//! | variable | default |
//! |---|---|
//! | `MARGIN_STORE` | `margin-store.json`; `:memory:` keeps nothing on disk |
//! | `MARGIN_LISTEN` | `127.0.0.1:8080` |
//! | `MARGIN_STUB_SCRIPT` | unset: the stub provider answers nothing |
//! | `MARGIN_EMBEDDING_ENDPOINT`, `MARGIN_EMBEDDING_MODEL`, `MARGIN_EMBEDDING_DIM` | unset: hashed stub embeddings |
//!
//! plus the provider variables read by `ProviderConfig::from_env` and the
//! service variables read by [`ServiceConfig::from_lookup`].

use std::path::PathBuf;
use std::sync::Arc;

use margin_core::gateway::{build_provider, ReqwestTransport};
use margin_core::retrieval::{Embedder, LiveEmbedder, StubEmbedder};
use margin_core::{Gateway, ProviderConfig, StubScript};

use crate::service::{Forum, ServiceConfig, SystemClock};
use crate::store::{DocumentStore, FileStore, InMemoryStore};

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub store: Option<PathBuf>,
    pub listen: String,
    pub stub_script: Option<PathBuf>,
    pub provider: ProviderConfig,
    pub service: ServiceConfig,
    pub embedding: Option<ProviderConfig>,
    pub embedding_dim: usize,
}

impl AppConfig {
    pub fn from_env() -> Result<Self, String> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        let provider = ProviderConfig::from_lookup(&get).map_err(|e| e.to_string())?;
        let service = ServiceConfig::from_lookup(&get)?;
        let store = match get("MARGIN_STORE").as_deref() {
            Some(":memory:") => None,
            Some(path) => Some(PathBuf::from(path)),
            None => Some(PathBuf::from("margin-store.json")),
        };
        let embedding = get("MARGIN_EMBEDDING_ENDPOINT").map(|endpoint| ProviderConfig {
            endpoint: Some(endpoint),
            model_name: get("MARGIN_EMBEDDING_MODEL").unwrap_or_else(|| provider.model_name.clone()),
            ..provider.clone()
        });
        let embedding_dim = match get("MARGIN_EMBEDDING_DIM") {
            Some(d) => d.parse().map_err(|_| format!("bad MARGIN_EMBEDDING_DIM: {d}"))?,
            None => margin_core::retrieval::STUB_DIMENSION,
        };
        Ok(Self {
            store,
            listen: get("MARGIN_LISTEN").unwrap_or_else(|| "127.0.0.1:8080".into()),
            stub_script: get("MARGIN_STUB_SCRIPT").map(PathBuf::from),
            provider,
            service,
            embedding,
            embedding_dim,
        })
    }

    pub fn build_forum(&self) -> Result<Forum, String> {
        let store: Arc<dyn DocumentStore> = match &self.store {
            Some(path) => Arc::new(FileStore::open(path).map_err(|e| e.to_string())?),
            None => Arc::new(InMemoryStore::new()),
        };
        let script = match &self.stub_script {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                serde_json::from_str::<StubScript>(&text).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => StubScript::new(),
        };
        let transport = Arc::new(ReqwestTransport::default());
        let provider = build_provider(&self.provider, script, transport.clone()).map_err(|e| e.to_string())?;
        let gateway = Gateway::new(provider, self.provider.clone());
        let embedder: Arc<dyn Embedder<f64>> = match &self.embedding {
            Some(cfg) => Arc::new(LiveEmbedder::new(cfg.clone(), self.embedding_dim, transport).map_err(|e| e.to_string())?),
            None => Arc::new(StubEmbedder::with_dimension(self.embedding_dim)),
        };
        Ok(Forum::new(store, gateway, embedder, self.service.clone(), Arc::new(SystemClock::default())))
    }
}
