//! HTTP+JSON routes. Every handler authenticates with a bearer token and runs
//! the forum call on the blocking pool, since provider calls are synchronous.

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use margin_core::blend::{BlendSelection, InspiringQuestion};
use margin_core::report::render_markdown;
use margin_core::{MaterialId, PostId, UserId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::service::{Forum, NewPost};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::Unauthorized(_) => StatusCode::UNAUTHORIZED,
            ServiceError::Forbidden(_) => StatusCode::FORBIDDEN,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Validation(_) => StatusCode::BAD_REQUEST,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Gating { .. } => StatusCode::CONFLICT,
            ServiceError::Store(_) => match self.code() {
                "conflict" => StatusCode::CONFLICT,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ServiceError::Pipeline(_) => match self.code() {
                "validation" => StatusCode::BAD_REQUEST,
                "state" => StatusCode::CONFLICT,
                "llm_validation" => StatusCode::UNPROCESSABLE_ENTITY,
                "llm_provider" => StatusCode::BAD_GATEWAY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
        };
        (status, Json(self.envelope())).into_response()
    }
}

/// The authenticated user.
pub struct Caller(pub UserId);

impl FromRequestParts<Forum> for Caller {
    type Rejection = ServiceError;

    async fn from_request_parts(parts: &mut Parts, forum: &Forum) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ServiceError::Unauthorized("expected an Authorization: Bearer header".into()))?
            .trim()
            .to_string();
        let forum = forum.clone();
        blocking(move || forum.authenticate(&token)).await.map(Caller)
    }
}

/// JSON body whose rejections use the error envelope.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ServiceError::Validation(rejection_message(e))),
        }
    }
}

fn rejection_message(e: JsonRejection) -> String {
    e.body_text()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ServiceError::Validation(format!("request handler failed: {e}"))))
}

type Reply<T> = Result<Json<T>, ServiceError>;

pub fn router(forum: Forum) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/materials", post(create_material))
        .route("/materials/{id}", get(get_material))
        .route("/posts", post(create_post).get(list_posts))
        .route("/posts/merge", post(merge_posts))
        .route("/posts/{id}/reply", post(reply))
        .route("/state/{material}", get(get_state))
        .route("/state/{material}/show-public", post(show_public))
        .route("/events/view", post(record_view))
        .route("/pipelines/order", post(order))
        .route("/pipelines/summary", post(summary))
        .route("/pipelines/pair", post(pair))
        .route("/pipelines/aspects", post(aspects))
        .route("/pipelines/question", post(question))
        .route("/pipelines/evidence", post(evidence))
        .route("/report", get(report))
        .with_state(forum)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaterialUpload {
    pub id: String,
    pub title: String,
    pub text: String,
}

async fn create_material(State(f): State<Forum>, _: Caller, Body(m): Body<MaterialUpload>) -> Result<impl IntoResponse, ServiceError> {
    let out = blocking(move || f.ingest_material(&m.id, &m.title, &m.text)).await?;
    Ok((StatusCode::CREATED, Json(out)))
}

async fn get_material(State(f): State<Forum>, _: Caller, Path(id): Path<String>) -> Reply<crate::service::MaterialSummary> {
    blocking(move || f.material_summary(&MaterialId::new(id))).await.map(Json)
}

async fn create_post(State(f): State<Forum>, Caller(u): Caller, Body(p): Body<NewPost>) -> Result<impl IntoResponse, ServiceError> {
    let out = blocking(move || f.create_post(&u, p)).await?;
    Ok((StatusCode::CREATED, Json(out)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaterialQuery {
    pub material: String,
    #[serde(default)]
    pub format: Option<String>,
}

async fn list_posts(State(f): State<Forum>, Caller(u): Caller, Query(q): Query<MaterialQuery>) -> Reply<Vec<margin_core::Post>> {
    blocking(move || f.list_visible_posts(&u, &MaterialId::new(q.material))).await.map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplyBody {
    pub content: String,
}

async fn reply(State(f): State<Forum>, Caller(u): Caller, Path(id): Path<u64>, Body(b): Body<ReplyBody>) -> Result<impl IntoResponse, ServiceError> {
    let out = blocking(move || f.reply(&u, PostId(id), b.content)).await?;
    Ok((StatusCode::CREATED, Json(out)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MergeBody {
    pub post_ids: Vec<PostId>,
}

async fn merge_posts(State(f): State<Forum>, Caller(u): Caller, Body(b): Body<MergeBody>) -> Result<impl IntoResponse, ServiceError> {
    let out = blocking(move || f.merge_posts(&u, &b.post_ids)).await?;
    Ok((StatusCode::CREATED, Json(out)))
}

async fn get_state(State(f): State<Forum>, Caller(u): Caller, Path(m): Path<String>) -> Reply<crate::service::UserMaterialState> {
    blocking(move || {
        let m = MaterialId::new(m);
        f.material(&m)?;
        f.state(&u, &m)
    })
    .await
    .map(Json)
}

async fn show_public(State(f): State<Forum>, Caller(u): Caller, Path(m): Path<String>) -> Reply<crate::service::UserMaterialState> {
    blocking(move || f.show_public(&u, &MaterialId::new(m))).await.map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ViewBody {
    pub material_id: MaterialId,
    pub paragraph: usize,
}

async fn record_view(State(f): State<Forum>, Caller(u): Caller, Body(b): Body<ViewBody>) -> Result<StatusCode, ServiceError> {
    blocking(move || f.record_view(&u, &b.material_id, b.paragraph)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OrderBody {
    pub post_id: PostId,
}

async fn order(State(f): State<Forum>, Caller(u): Caller, Body(b): Body<OrderBody>) -> Reply<margin_core::affinity::AffinityOrdering> {
    blocking(move || f.order(&u, b.post_id)).await.map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryBody {
    pub post_id: PostId,
    #[serde(default)]
    pub include_replies: bool,
    /// Regeneration counter; ask for `previous.nonce + 1` to regenerate.
    #[serde(default)]
    pub nonce: u32,
}

async fn summary(State(f): State<Forum>, Caller(u): Caller, Body(b): Body<SummaryBody>) -> Reply<margin_core::summarize::Summary> {
    blocking(move || f.summarize(&u, b.post_id, b.include_replies, b.nonce)).await.map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairBody {
    pub post_a: PostId,
    pub post_b: PostId,
}

async fn pair(State(f): State<Forum>, Caller(u): Caller, Body(b): Body<PairBody>) -> Reply<margin_core::highlight::PairAnalysis> {
    blocking(move || f.pair_analysis(&u, b.post_a, b.post_b)).await.map(Json)
}

async fn aspects(State(f): State<Forum>, Caller(u): Caller, Body(b): Body<PairBody>) -> Reply<margin_core::blend::AspectExtraction> {
    blocking(move || f.aspects(&u, b.post_a, b.post_b)).await.map(Json)
}

async fn question(State(f): State<Forum>, Caller(u): Caller, Body(s): Body<BlendSelection>) -> Reply<InspiringQuestion> {
    blocking(move || f.question(&u, &s)).await.map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvidenceBody {
    pub selection: BlendSelection,
    pub question: InspiringQuestion,
}

async fn evidence(State(f): State<Forum>, Caller(u): Caller, Body(b): Body<EvidenceBody>) -> Reply<margin_core::blend::BlendArtifact> {
    blocking(move || f.evidence(&u, &b.selection, &b.question)).await.map(Json)
}

async fn report(State(f): State<Forum>, Caller(u): Caller, Query(q): Query<MaterialQuery>) -> Result<Response, ServiceError> {
    let markdown = q.format.as_deref() == Some("markdown");
    let material = MaterialId::new(q.material);
    let (report, m) = blocking(move || Ok((f.report(&u, &material)?, f.material(&material)?))).await?;
    Ok(if markdown {
        ([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], render_markdown(&report, &m)).into_response()
    } else {
        Json(report).into_response()
    })
}
