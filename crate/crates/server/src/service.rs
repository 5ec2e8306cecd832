//! The forum: sessions, materials, the post lifecycle, private/public gating
//! and the pipeline endpoints, all on top of a [`DocumentStore`].
//!
//! Posts from a user become visible to others only once that user has gone
//! public on the material, and only to readers who have gone public themselves.
//! Visibility is derived from both users' modes at read time, so a mode change
//! never races with post creation.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use margin_core::affinity::{analyze_affinity_or_fallback, order_posts, AffinityOrdering};
use margin_core::blend::{
    check_selection, extract_aspects, generate_question, question_length, retrieve_evidence, AspectExtraction,
    BlendArtifact, BlendSelection, EvidenceContext, InspiringQuestion,
};
use margin_core::gateway::{Gateway, Verdict};
use margin_core::highlight::{analyze_pair, PairAnalysis};
use margin_core::ingest::{chunk_material, parse_material, Chunk};
use margin_core::model::{BlendStage, EngagementEvent, EventKind, HighlightRange, Timestamp, Visibility};
use margin_core::report::{assemble_report, LearningReport, QuestionRecord, ReportConfig, ReportInputs};
use margin_core::retrieval::{Embedder, StubEmbedder};
use margin_core::summarize::{summarize_post_at, Summary};
use margin_core::text::word_count;
use margin_core::{Index, Material, MaterialId, Post, PostId, StubScript, UserId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ServiceError;
use crate::store::{get_as, insert_new, next_sequence, scan_as, update, DocumentStore, InMemoryStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub min_private_posts: usize,
    pub hot_spot_min_posts: usize,
    pub max_chunk_words: usize,
    pub session_ttl_secs: u64,
    /// Attempts per compare-and-update before giving up.
    pub max_write_attempts: u32,
    pub view_weight: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            min_private_posts: 2,
            hot_spot_min_posts: 2,
            max_chunk_words: margin_core::ingest::DEFAULT_MAX_CHUNK_WORDS,
            session_ttl_secs: 60 * 60 * 24 * 30,
            max_write_attempts: 256,
            view_weight: 0.0,
        }
    }
}

impl ServiceConfig {
    /// Reads `MARGIN_MIN_PRIVATE_POSTS`, `MARGIN_HOT_SPOT_MIN_POSTS`,
    /// `MARGIN_MAX_CHUNK_WORDS`, `MARGIN_SESSION_TTL_SECS` and `MARGIN_VIEW_WEIGHT`.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        fn parse<T: std::str::FromStr>(get: &impl Fn(&str) -> Option<String>, key: &str, into: &mut T) -> Result<(), String> {
            if let Some(v) = get(key) {
                *into = v.parse().map_err(|_| format!("bad {key}: {v}"))?;
            }
            Ok(())
        }
        let mut c = Self::default();
        parse(&get, "MARGIN_MIN_PRIVATE_POSTS", &mut c.min_private_posts)?;
        parse(&get, "MARGIN_HOT_SPOT_MIN_POSTS", &mut c.hot_spot_min_posts)?;
        parse(&get, "MARGIN_MAX_CHUNK_WORDS", &mut c.max_chunk_words)?;
        parse(&get, "MARGIN_SESSION_TTL_SECS", &mut c.session_ttl_secs)?;
        parse(&get, "MARGIN_VIEW_WEIGHT", &mut c.view_weight)?;
        Ok(c)
    }

    fn report(&self) -> ReportConfig {
        ReportConfig { hot_spot_min_posts: self.hot_spot_min_posts, view_weight: self.view_weight }
    }
}

pub trait Clock: Send + Sync {
    /// Strictly increasing milliseconds.
    fn now(&self) -> Timestamp;
}

/// Wall clock, nudged forward so two calls never return the same instant.
#[derive(Debug, Default)]
pub struct SystemClock {
    last: AtomicU64,
}

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let wall = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        let prev = self.last.fetch_max(wall, Ordering::SeqCst).max(wall);
        // Someone may have taken `prev`; claim the next free tick.
        let mut t = prev;
        loop {
            match self.last.compare_exchange(t, t + 1, Ordering::SeqCst, Ordering::SeqCst) {
                Ok(_) => return Timestamp(t + 1),
                Err(actual) => t = actual,
            }
        }
    }
}

/// Counter clock for reproducible runs.
#[derive(Debug, Default)]
pub struct LogicalClock {
    tick: AtomicU64,
}

impl Clock for LogicalClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.tick.fetch_add(1, Ordering::SeqCst) + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: UserId,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SessionRecord {
    user: UserId,
    expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub user: UserId,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserMaterialState {
    pub user: UserId,
    pub material_id: MaterialId,
    pub mode: Visibility,
    pub private_post_count: usize,
    /// Store version of this record.
    #[serde(default)]
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSummary {
    pub material: Material,
    pub chunk_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewPost {
    pub material_id: MaterialId,
    pub anchor_paragraph: usize,
    pub content: String,
    #[serde(default)]
    pub highlight: Option<HighlightRange>,
}

fn key_post(id: PostId) -> String {
    format!("post/{:012}", id.0)
}

fn key_children(id: PostId) -> String {
    format!("children/{:012}", id.0)
}

fn key_state(user: &UserId, material: &MaterialId) -> String {
    format!("state/{}/{}", material.as_str(), user.as_str())
}

fn hash_token(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

fn check_name(kind: &str, s: &str) -> Result<(), ServiceError> {
    let ok = !s.is_empty() && s.len() <= 64 && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ServiceError::Validation(format!("{kind} {s:?} must be 1-64 characters of letters, digits, '-', '_' or '.'")))
    }
}

struct Inner {
    store: Arc<dyn DocumentStore>,
    gateway: Gateway,
    embedder: Arc<dyn Embedder<f64>>,
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
}

/// Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Forum {
    inner: Arc<Inner>,
}

impl Forum {
    pub fn new(
        store: Arc<dyn DocumentStore>,
        gateway: Gateway,
        embedder: Arc<dyn Embedder<f64>>,
        config: ServiceConfig,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self { inner: Arc::new(Inner { store, gateway, embedder, config, clock }) }
    }

    /// In-memory, stub-backed forum with a logical clock.
    pub fn stub(script: StubScript, config: ServiceConfig) -> Self {
        Self::new(
            Arc::new(InMemoryStore::new()),
            Gateway::stub(script),
            Arc::new(StubEmbedder::default()),
            config,
            Arc::new(LogicalClock::default()),
        )
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn store(&self) -> &dyn DocumentStore {
        self.inner.store.as_ref()
    }

    fn now(&self) -> Timestamp {
        self.inner.clock.now()
    }

    fn attempts(&self) -> u32 {
        self.inner.config.max_write_attempts
    }

    // Users and sessions ---------------------------------------------------------

    /// Creates the user if missing.
    pub fn provision_user(&self, id: &str) -> Result<UserRecord, ServiceError> {
        check_name("user id", id)?;
        let record = UserRecord { id: UserId::new(id), created_at: self.now() };
        update(self.store(), &format!("user/{id}"), self.attempts(), |existing: Option<UserRecord>| {
            Ok::<_, ServiceError>(existing.unwrap_or_else(|| record.clone()))
        })
    }

    pub fn users(&self) -> Result<Vec<UserRecord>, ServiceError> {
        Ok(scan_as(self.store(), "user/")?)
    }

    /// Issues a fresh bearer token. Only its hash is stored.
    pub fn issue_session(&self, user: &UserId) -> Result<Session, ServiceError> {
        if get_as::<UserRecord>(self.store(), &format!("user/{}", user.as_str()))?.is_none() {
            return Err(ServiceError::NotFound(format!("no user {user}")));
        }
        let mut bytes = [0u8; 32];
        rand::rng().fill(&mut bytes);
        let token = hex::encode(bytes);
        let expires_at = Timestamp(self.now().0.saturating_add(self.inner.config.session_ttl_secs.saturating_mul(1000)));
        insert_new(self.store(), &format!("session/{}", hash_token(&token)), &SessionRecord { user: user.clone(), expires_at })?;
        Ok(Session { token, user: user.clone(), expires_at })
    }

    pub fn authenticate(&self, token: &str) -> Result<UserId, ServiceError> {
        let unauthorized = || ServiceError::Unauthorized("missing, unknown or expired session".into());
        let (session, _) = get_as::<SessionRecord>(self.store(), &format!("session/{}", hash_token(token)))?.ok_or_else(unauthorized)?;
        if session.expires_at <= self.now() {
            return Err(unauthorized());
        }
        Ok(session.user)
    }

    // Materials ------------------------------------------------------------------

    pub fn ingest_material(&self, id: &str, title: &str, raw: &str) -> Result<MaterialSummary, ServiceError> {
        check_name("material id", id)?;
        let material = parse_material(MaterialId::new(id), title, raw)?;
        let chunks = chunk_material(&material, self.inner.config.max_chunk_words)?;
        let index = Index::build(material.id.clone(), &chunks, self.inner.embedder.as_ref()).map_err(margin_core::PipelineError::from)?;
        // Chunks and index first: a material is only visible once it is complete.
        self.store().compare_and_put(&format!("chunks/{id}"), None, serde_json::to_value(&chunks).expect("chunks serialize")).map_err(
            |_| ServiceError::Conflict(format!("material {id} already exists")),
        )?;
        insert_new(self.store(), &format!("index/{id}"), &index)?;
        insert_new(self.store(), &format!("material/{id}"), &material)?;
        Ok(MaterialSummary { chunk_count: chunks.len(), material })
    }

    pub fn material(&self, id: &MaterialId) -> Result<Material, ServiceError> {
        get_as::<Material>(self.store(), &format!("material/{}", id.as_str()))?
            .map(|(m, _)| m)
            .ok_or_else(|| ServiceError::NotFound(format!("no material {id}")))
    }

    pub fn material_summary(&self, id: &MaterialId) -> Result<MaterialSummary, ServiceError> {
        let material = self.material(id)?;
        Ok(MaterialSummary { chunk_count: self.chunks(id)?.len(), material })
    }

    fn chunks(&self, id: &MaterialId) -> Result<Vec<Chunk>, ServiceError> {
        Ok(get_as(self.store(), &format!("chunks/{}", id.as_str()))?.map(|(c, _)| c).unwrap_or_default())
    }

    fn index(&self, id: &MaterialId) -> Result<Index, ServiceError> {
        get_as(self.store(), &format!("index/{}", id.as_str()))?
            .map(|(i, _)| i)
            .ok_or_else(|| ServiceError::NotFound(format!("no index for material {id}")))
    }

    // Mode -----------------------------------------------------------------------

    pub fn state(&self, user: &UserId, material: &MaterialId) -> Result<UserMaterialState, ServiceError> {
        Ok(match get_as::<UserMaterialState>(self.store(), &key_state(user, material))? {
            Some((mut s, version)) => {
                s.version = version;
                s
            }
            None => UserMaterialState {
                user: user.clone(),
                material_id: material.clone(),
                mode: Visibility::Private,
                private_post_count: 0,
                version: 0,
            },
        })
    }

    fn mode(&self, user: &UserId, material: &MaterialId) -> Result<Visibility, ServiceError> {
        Ok(self.state(user, material)?.mode)
    }

    fn update_state(
        &self,
        user: &UserId,
        material: &MaterialId,
        mut f: impl FnMut(&mut UserMaterialState) -> Result<(), ServiceError>,
    ) -> Result<UserMaterialState, ServiceError> {
        let key = key_state(user, material);
        update(self.store(), &key, self.attempts(), |current: Option<UserMaterialState>| {
            let mut s = current.unwrap_or(UserMaterialState {
                user: user.clone(),
                material_id: material.clone(),
                mode: Visibility::Private,
                private_post_count: 0,
                version: 0,
            });
            f(&mut s)?;
            Ok::<_, ServiceError>(s)
        })?;
        self.state(user, material)
    }

    /// Private to public, once enough private posts exist. Idempotent.
    pub fn show_public(&self, user: &UserId, material: &MaterialId) -> Result<UserMaterialState, ServiceError> {
        self.material(material)?;
        let required = self.inner.config.min_private_posts;
        let state = self.update_state(user, material, |s| {
            if s.mode == Visibility::Public {
                return Ok(());
            }
            if s.private_post_count < required {
                return Err(ServiceError::Gating { required, have: s.private_post_count });
            }
            s.mode = Visibility::Public;
            Ok(())
        })?;
        // Stored visibility follows the mode; reads derive it from the mode anyway.
        for p in self.posts_in(material)?.into_iter().filter(|p| &p.author == user && p.visibility == Visibility::Private) {
            self.update_post(p.id, |q| q.visibility = Visibility::Public)?;
        }
        Ok(state)
    }

    // Posts ----------------------------------------------------------------------

    fn posts_in(&self, material: &MaterialId) -> Result<Vec<Post>, ServiceError> {
        Ok(scan_as::<Post>(self.store(), "post/")?.into_iter().filter(|p| &p.material_id == material).collect())
    }

    fn post(&self, id: PostId) -> Result<Post, ServiceError> {
        get_as::<Post>(self.store(), &key_post(id))?.map(|(p, _)| p).ok_or_else(|| ServiceError::NotFound(format!("no post {id}")))
    }

    fn update_post(&self, id: PostId, mut f: impl FnMut(&mut Post)) -> Result<Post, ServiceError> {
        update(self.store(), &key_post(id), self.attempts(), |p: Option<Post>| {
            let mut p = p.ok_or_else(|| ServiceError::NotFound(format!("no post {id}")))?;
            f(&mut p);
            Ok(p)
        })
    }

    /// Modes of every user with state on the material.
    fn modes(&self, material: &MaterialId) -> Result<HashMap<UserId, Visibility>, ServiceError> {
        let states: Vec<UserMaterialState> = scan_as(self.store(), &format!("state/{}/", material.as_str()))?;
        Ok(states.into_iter().map(|s| (s.user, s.mode)).collect())
    }

    fn visible(viewer: &UserId, post: &Post, modes: &HashMap<UserId, Visibility>) -> bool {
        if post.archived {
            return false;
        }
        let public = |u: &UserId| modes.get(u) == Some(&Visibility::Public);
        &post.author == viewer || (public(viewer) && public(&post.author))
    }

    /// A post the viewer may reference. Invisible posts are reported as missing
    /// when they exist but belong to someone else, so ids cannot be probed.
    fn visible_post(&self, viewer: &UserId, id: PostId) -> Result<Post, ServiceError> {
        let post = self.post(id)?;
        if post.archived {
            return Err(ServiceError::NotFound(format!("post {id} was merged into another post")));
        }
        if !Self::visible(viewer, &post, &self.modes(&post.material_id)?) {
            return Err(ServiceError::Forbidden(format!("post {id} is not visible to you")));
        }
        Ok(post)
    }

    pub fn list_visible_posts(&self, viewer: &UserId, material: &MaterialId) -> Result<Vec<Post>, ServiceError> {
        self.material(material)?;
        let modes = self.modes(material)?;
        let mut posts: Vec<Post> = self.posts_in(material)?.into_iter().filter(|p| Self::visible(viewer, p, &modes)).collect();
        posts.sort_by_key(|p| (p.anchor_paragraph, p.created_at, p.id));
        Ok(posts)
    }

    fn log(&self, event: Result<EngagementEvent, margin_core::model::DomainError>) -> Result<(), ServiceError> {
        let event = event.map_err(margin_core::PipelineError::from)?;
        let seq = next_sequence(self.store(), "seq/event", self.attempts())?;
        let key = format!("event/{}/{}/{seq:012}", event.material_id.as_str(), event.user.as_str());
        insert_new(self.store(), &key, &event)?;
        Ok(())
    }

    fn event(&self, user: &UserId, kind: EventKind, post: &Post, peer: Option<&UserId>) -> Result<EngagementEvent, margin_core::model::DomainError> {
        EngagementEvent::new(user.clone(), kind, post.material_id.clone(), Some(post.anchor_paragraph), peer.cloned(), self.now())
    }

    fn store_post(&self, post: &Post) -> Result<(), ServiceError> {
        insert_new(self.store(), &key_post(post.id), post)?;
        Ok(())
    }

    fn new_post_id(&self) -> Result<PostId, ServiceError> {
        Ok(PostId(next_sequence(self.store(), "seq/post", self.attempts())?))
    }

    fn check_content(content: &str) -> Result<(), ServiceError> {
        if content.trim().is_empty() {
            return Err(ServiceError::Validation("post content is empty".into()));
        }
        Ok(())
    }

    pub fn create_post(&self, author: &UserId, new: NewPost) -> Result<Post, ServiceError> {
        let material = self.material(&new.material_id)?;
        if new.anchor_paragraph >= material.len() {
            return Err(ServiceError::Validation(format!(
                "anchor paragraph {} is out of range (material has {} paragraphs)",
                new.anchor_paragraph,
                material.len()
            )));
        }
        Self::check_content(&new.content)?;
        if let Some(h) = new.highlight {
            let len = material.paragraph(new.anchor_paragraph).map(|p| p.text.len()).unwrap_or(0);
            if h.start >= h.end || h.end > len {
                return Err(ServiceError::Validation(format!("highlight {}..{} is outside the paragraph", h.start, h.end)));
            }
        }
        // The counter update doubles as the mode snapshot.
        let state = self.update_state(author, &new.material_id, |s| {
            if s.mode == Visibility::Private {
                s.private_post_count += 1;
            }
            Ok(())
        })?;
        let post = Post {
            id: self.new_post_id()?,
            author: author.clone(),
            material_id: new.material_id,
            anchor_paragraph: new.anchor_paragraph,
            content: new.content,
            visibility: state.mode,
            created_at: self.now(),
            parent: None,
            merged_from: None,
            archived: false,
            highlight: new.highlight,
        };
        self.store_post(&post)?;
        self.log(self.event(author, EventKind::Post, &post, None))?;
        Ok(post)
    }

    pub fn reply(&self, author: &UserId, parent: PostId, content: String) -> Result<Post, ServiceError> {
        Self::check_content(&content)?;
        let parent = self.visible_post(author, parent)?;
        let mode = self.mode(author, &parent.material_id)?;
        let post = Post {
            id: self.new_post_id()?,
            author: author.clone(),
            material_id: parent.material_id.clone(),
            anchor_paragraph: parent.anchor_paragraph,
            content,
            visibility: mode,
            created_at: self.now(),
            parent: Some(parent.id),
            merged_from: None,
            archived: false,
            highlight: None,
        };
        self.store_post(&post)?;
        let id = post.id;
        update(self.store(), &key_children(parent.id), self.attempts(), |kids: Option<Vec<PostId>>| {
            let mut kids = kids.unwrap_or_default();
            if !kids.contains(&id) {
                kids.push(id);
            }
            Ok::<_, ServiceError>(kids)
        })?;
        self.log(self.event(author, EventKind::Reply, &post, Some(&parent.author)))?;
        Ok(post)
    }

    /// Direct replies to `parent`, in the order they were recorded.
    pub fn children(&self, parent: PostId) -> Result<Vec<PostId>, ServiceError> {
        Ok(get_as(self.store(), &key_children(parent))?.map(|(k, _)| k).unwrap_or_default())
    }

    pub fn merge_posts(&self, author: &UserId, ids: &[PostId]) -> Result<Post, ServiceError> {
        let unique: HashSet<PostId> = ids.iter().copied().collect();
        if unique.len() < 2 || unique.len() != ids.len() {
            return Err(ServiceError::Validation("merge needs at least two distinct posts".into()));
        }
        let mut sources = Vec::with_capacity(ids.len());
        for id in ids {
            let p = self.post(*id)?;
            if &p.author != author {
                return Err(ServiceError::Forbidden(format!("post {id} is not yours")));
            }
            if p.archived {
                return Err(ServiceError::Validation(format!("post {id} was already merged")));
            }
            if p.is_reply() {
                return Err(ServiceError::Validation(format!("post {id} is a reply; only top-level posts merge")));
            }
            if !self.children(p.id)?.is_empty() {
                return Err(ServiceError::Validation(format!("post {id} has replies and cannot be merged")));
            }
            sources.push(p);
        }
        if sources.iter().any(|p| p.material_id != sources[0].material_id) {
            return Err(ServiceError::Validation("posts belong to different materials".into()));
        }
        sources.sort_by_key(|p| (p.created_at, p.id));
        let material_id = sources[0].material_id.clone();
        let mode = self.mode(author, &material_id)?;
        let post = Post {
            id: self.new_post_id()?,
            author: author.clone(),
            material_id,
            anchor_paragraph: sources[0].anchor_paragraph,
            content: sources.iter().map(|p| p.content.as_str()).collect::<Vec<_>>().join("\n\n"),
            visibility: mode,
            created_at: self.now(),
            parent: None,
            merged_from: Some(sources.iter().map(|p| p.id).collect()),
            archived: false,
            highlight: None,
        };
        self.store_post(&post)?;
        for s in &sources {
            self.update_post(s.id, |p| p.archived = true)?;
        }
        self.log(self.event(author, EventKind::Merge, &post, None))?;
        Ok(post)
    }

    /// Admin seeding: stores a public post for `author`, switching the author to
    /// public mode without the private-post gate.
    pub fn seed_post(&self, author: &str, new: NewPost) -> Result<Post, ServiceError> {
        let user = self.provision_user(author)?.id;
        self.material(&new.material_id)?;
        self.update_state(&user, &new.material_id, |s| {
            s.mode = Visibility::Public;
            Ok(())
        })?;
        self.create_post(&user, new)
    }

    pub fn record_view(&self, user: &UserId, material: &MaterialId, paragraph: usize) -> Result<(), ServiceError> {
        let m = self.material(material)?;
        if paragraph >= m.len() {
            return Err(ServiceError::Validation(format!("paragraph {paragraph} is out of range")));
        }
        self.log(EngagementEvent::new(user.clone(), EventKind::View, material.clone(), Some(paragraph), None, self.now()))
    }

    // Pipelines ------------------------------------------------------------------

    pub fn order(&self, user: &UserId, primary: PostId) -> Result<AffinityOrdering, ServiceError> {
        let primary = self.visible_post(user, primary)?;
        let candidates: Vec<Post> = self
            .list_visible_posts(user, &primary.material_id)?
            .into_iter()
            .filter(|p| p.id != primary.id && !p.is_reply())
            .collect();
        let analysis = analyze_affinity_or_fallback(&primary, &candidates, &self.inner.gateway, self.inner.embedder.as_ref())?;
        let by_id: HashMap<PostId, Post> = candidates.into_iter().map(|p| (p.id, p)).collect();
        let ordering = order_posts(&primary, &analysis.entries, &by_id)?;
        self.log(self.event(user, EventKind::Order, &primary, None))?;
        Ok(ordering)
    }

    pub fn summarize(&self, user: &UserId, post: PostId, include_replies: bool, nonce: u32) -> Result<Summary, ServiceError> {
        let post = self.visible_post(user, post)?;
        let replies = if include_replies {
            let visible = self.list_visible_posts(user, &post.material_id)?;
            let mut in_thread: HashSet<PostId> = HashSet::from([post.id]);
            let mut thread = Vec::new();
            // Posts are created after their parents, so one pass in id order suffices.
            let mut by_id: Vec<&Post> = visible.iter().filter(|p| p.is_reply()).collect();
            by_id.sort_by_key(|p| p.id);
            for p in by_id {
                if p.parent.is_some_and(|parent| in_thread.contains(&parent)) {
                    in_thread.insert(p.id);
                    thread.push(p.clone());
                }
            }
            thread
        } else {
            Vec::new()
        };
        let summary = summarize_post_at(&post, &replies, include_replies, nonce, &self.inner.gateway)?;
        self.log(self.event(user, EventKind::Summarize, &post, None))?;
        Ok(summary)
    }

    fn pair_of(&self, user: &UserId, a: PostId, b: PostId) -> Result<(Post, Post), ServiceError> {
        Ok((self.visible_post(user, a)?, self.visible_post(user, b)?))
    }

    pub fn pair_analysis(&self, user: &UserId, a: PostId, b: PostId) -> Result<PairAnalysis, ServiceError> {
        let (a, b) = self.pair_of(user, a, b)?;
        let out = analyze_pair(&a, &b, &self.inner.gateway)?;
        self.log(self.event(user, EventKind::PairAnalysis, &a, Some(&b.author)))?;
        Ok(out)
    }

    pub fn aspects(&self, user: &UserId, a: PostId, b: PostId) -> Result<AspectExtraction, ServiceError> {
        let (a, b) = self.pair_of(user, a, b)?;
        let material = self.material(&a.material_id)?;
        let out = extract_aspects(&a, &b, &material, &self.inner.gateway)?;
        self.log(self.event(user, EventKind::Blend, &a, Some(&b.author)).map(|e| e.with_stage(BlendStage::Aspects)))?;
        Ok(out)
    }

    pub fn question(&self, user: &UserId, selection: &BlendSelection) -> Result<InspiringQuestion, ServiceError> {
        let (a, b) = self.pair_of(user, selection.post_a, selection.post_b)?;
        let question = generate_question(selection, &a, &b, &self.inner.gateway)?;
        let record = QuestionRecord { question: question.clone(), selection: selection.clone(), created_at: self.now() };
        let seq = next_sequence(self.store(), "seq/question", self.attempts())?;
        insert_new(self.store(), &format!("question/{}/{}/{seq:012}", a.material_id.as_str(), user.as_str()), &record)?;
        self.log(self.event(user, EventKind::Blend, &a, Some(&b.author)).map(|e| e.with_stage(BlendStage::Question)))?;
        Ok(question)
    }

    pub fn evidence(&self, user: &UserId, selection: &BlendSelection, question: &InspiringQuestion) -> Result<BlendArtifact, ServiceError> {
        let (a, b) = self.pair_of(user, selection.post_a, selection.post_b)?;
        check_selection(selection, &a, &b)?;
        if let Verdict::Fail(msg) = question_length(&question.text) {
            return Err(ServiceError::Validation(msg));
        }
        let question = InspiringQuestion { word_count: word_count(&question.text), style: selection.style, ..question.clone() };
        let material = self.material(&a.material_id)?;
        let chunks = self.chunks(&material.id)?;
        let index = self.index(&material.id)?;
        let ctx = EvidenceContext::new(&material, &chunks, &index, self.inner.embedder.as_ref());
        let evidence = retrieve_evidence(selection, &question, &ctx, &self.inner.gateway)?;
        let artifact = BlendArtifact::new(selection.clone(), question, evidence)?;
        let seq = next_sequence(self.store(), "seq/blend", self.attempts())?;
        insert_new(self.store(), &format!("blend/{}/{}/{seq:012}", material.id.as_str(), user.as_str()), &artifact)?;
        self.log(self.event(user, EventKind::Blend, &a, Some(&b.author)).map(|e| e.with_stage(BlendStage::Evidence)))?;
        Ok(artifact)
    }

    pub fn blend_artifacts(&self, user: &UserId, material: &MaterialId) -> Result<Vec<BlendArtifact>, ServiceError> {
        Ok(scan_as(self.store(), &format!("blend/{}/{}/", material.as_str(), user.as_str()))?)
    }

    pub fn events(&self, user: &UserId, material: &MaterialId) -> Result<Vec<EngagementEvent>, ServiceError> {
        Ok(scan_as(self.store(), &format!("event/{}/{}/", material.as_str(), user.as_str()))?)
    }

    /// Builds the report from a snapshot of the store; the only write is the report event.
    pub fn report(&self, user: &UserId, material_id: &MaterialId) -> Result<LearningReport, ServiceError> {
        let material = self.material(material_id)?;
        let modes = self.modes(material_id)?;
        let all = self.posts_in(material_id)?;
        let public: Vec<Post> =
            all.iter().filter(|p| !p.archived && modes.get(&p.author) == Some(&Visibility::Public)).cloned().collect();
        let own: Vec<Post> = all.iter().filter(|p| !p.archived && &p.author == user).cloned().collect();
        let events = self.events(user, material_id)?;
        let questions: Vec<QuestionRecord> =
            scan_as(self.store(), &format!("question/{}/{}/", material_id.as_str(), user.as_str()))?;
        let inputs = ReportInputs {
            user,
            material: &material,
            public_posts: &public,
            user_posts: &own,
            events: &events,
            questions: &questions,
            now: self.now(),
        };
        let report = assemble_report(&inputs, &self.inner.config.report(), &self.inner.gateway)?;
        self.log(EngagementEvent::new(user.clone(), EventKind::Report, material_id.clone(), None, None, self.now()))?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forum() -> Forum {
        let f = Forum::stub(StubScript::new(), ServiceConfig::default());
        f.ingest_material("m", "Reading", "One paragraph here.\n\nTwo paragraph here.\n\nThree paragraph here.").unwrap();
        f
    }

    fn new_post(p: usize, text: &str) -> NewPost {
        NewPost { material_id: MaterialId::new("m"), anchor_paragraph: p, content: text.into(), highlight: None }
    }

    #[test]
    fn sessions_round_trip_and_reject_garbage() {
        let f = forum();
        let u = f.provision_user("amy").unwrap().id;
        let s = f.issue_session(&u).unwrap();
        assert_eq!(s.token.len(), 64);
        assert_eq!(f.authenticate(&s.token).unwrap(), u);
        assert!(matches!(f.authenticate("nope"), Err(ServiceError::Unauthorized(_))));
    }

    #[test]
    fn expired_session_is_rejected() {
        let f = Forum::stub(StubScript::new(), ServiceConfig { session_ttl_secs: 0, ..Default::default() });
        let u = f.provision_user("amy").unwrap().id;
        let s = f.issue_session(&u).unwrap();
        assert!(f.authenticate(&s.token).is_err());
    }

    #[test]
    fn gating_and_visibility() {
        let f = forum();
        let (amy, ben) = (UserId::new("amy"), UserId::new("ben"));
        f.create_post(&amy, new_post(0, "first")).unwrap();
        let err = f.show_public(&amy, &MaterialId::new("m")).unwrap_err();
        assert_eq!(err, ServiceError::Gating { required: 2, have: 1 });
        assert_eq!(err.detail()["remaining"], 1);
        f.create_post(&amy, new_post(1, "second")).unwrap();
        f.create_post(&ben, new_post(1, "ben one")).unwrap();
        f.create_post(&ben, new_post(2, "ben two")).unwrap();
        let m = MaterialId::new("m");
        assert_eq!(f.list_visible_posts(&ben, &m).unwrap().len(), 2);
        f.show_public(&amy, &m).unwrap();
        assert_eq!(f.list_visible_posts(&ben, &m).unwrap().len(), 2, "ben is still private");
        f.show_public(&ben, &m).unwrap();
        let seen: Vec<String> = f.list_visible_posts(&ben, &m).unwrap().into_iter().map(|p| p.content).collect();
        assert_eq!(seen, vec!["first", "second", "ben one", "ben two"]);
        assert!(f.list_visible_posts(&amy, &m).unwrap().iter().all(|p| p.visibility == Visibility::Public));
        assert_eq!(f.show_public(&ben, &m).unwrap().mode, Visibility::Public);
    }

    #[test]
    fn anchor_out_of_range() {
        let f = forum();
        let err = f.create_post(&UserId::new("amy"), new_post(99, "x")).unwrap_err();
        assert!(matches!(err, ServiceError::Validation(_)));
    }

    #[test]
    fn merge_joins_in_creation_order_and_archives() {
        let f = forum();
        let amy = UserId::new("amy");
        let a = f.create_post(&amy, new_post(2, "A")).unwrap();
        let b = f.create_post(&amy, new_post(0, "B")).unwrap();
        let merged = f.merge_posts(&amy, &[b.id, a.id]).unwrap();
        assert_eq!(merged.content, "A\n\nB");
        assert_eq!(merged.anchor_paragraph, 2);
        assert_eq!(merged.merged_from, Some(vec![a.id, b.id]));
        let listed = f.list_visible_posts(&amy, &MaterialId::new("m")).unwrap();
        assert_eq!(listed.iter().map(|p| p.id).collect::<Vec<_>>(), vec![merged.id]);
        // Merging does not count as a new private post.
        assert_eq!(f.state(&amy, &MaterialId::new("m")).unwrap().private_post_count, 2);
    }

    #[test]
    fn merge_rejects_foreign_and_replies() {
        let f = forum();
        let (amy, ben) = (UserId::new("amy"), UserId::new("ben"));
        let a = f.create_post(&amy, new_post(0, "A")).unwrap();
        let a2 = f.create_post(&amy, new_post(0, "A2")).unwrap();
        let b = f.create_post(&ben, new_post(0, "B")).unwrap();
        assert!(matches!(f.merge_posts(&amy, &[a.id, b.id]), Err(ServiceError::Forbidden(_))));
        let r = f.reply(&amy, a2.id, "self reply".into()).unwrap();
        assert!(matches!(f.merge_posts(&amy, &[a.id, r.id]), Err(ServiceError::Validation(_))));
    }

    #[test]
    fn replying_to_invisible_post_is_forbidden() {
        let f = forum();
        let (amy, ben) = (UserId::new("amy"), UserId::new("ben"));
        let a = f.create_post(&amy, new_post(0, "A")).unwrap();
        assert!(matches!(f.reply(&ben, a.id, "hi".into()), Err(ServiceError::Forbidden(_))));
        assert!(matches!(f.order(&ben, a.id), Err(ServiceError::Forbidden(_))));
    }

    #[test]
    fn events_are_logged_once_per_call() {
        let f = forum();
        let amy = UserId::new("amy");
        let a = f.create_post(&amy, new_post(0, "A")).unwrap();
        f.reply(&amy, a.id, "r".into()).unwrap();
        f.record_view(&amy, &MaterialId::new("m"), 1).unwrap();
        let kinds: Vec<EventKind> = f.events(&amy, &MaterialId::new("m")).unwrap().into_iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EventKind::Post, EventKind::Reply, EventKind::View]);
    }

    #[test]
    fn duplicate_material_conflicts() {
        let f = forum();
        assert!(matches!(f.ingest_material("m", "again", "text"), Err(ServiceError::Conflict(_))));
        assert!(matches!(f.ingest_material("bad id", "t", "text"), Err(ServiceError::Validation(_))));
    }
}
