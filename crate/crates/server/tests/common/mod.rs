//! Fixtures shared by the integration targets: a short climate-policy reading,
//! two students' posts and a stub script that drives every pipeline.
#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use margin_core::{StubScript, TemplateId};
use serde_json::{json, Value};
use tower::ServiceExt;

pub const MATERIAL_ID: &str = "climate-week-3";
pub const MATERIAL_TITLE: &str = "Cooperation Problems in Climate Policy";

pub const MATERIAL: &str = "\
Climate change is a collective action problem. Every country benefits from a stable climate, but each bears the cost of its own emission cuts.

When trust is low, governments expect others to defect. Each state reasons that cutting emissions alone only hands an advantage to its rivals.

Trade policy has become entangled with climate goals. Tariffs and subsidies protect domestic producers, and voters often reward leaders who put national industry first.

International agreements try to change these incentives. Repeated negotiation rounds, transparency rules and peer review make promises easier to verify.

Carbon border adjustments price the emissions embedded in imports. Supporters see them as a lever for cooperation, while critics call them disguised protectionism.

Enforcement remains the weakest link. Without credible penalties, treaties rely on reputation and on the long shadow of future negotiations.";

pub const ALEX_POST_1: &str =
    "Economic nationalism pushes governments to shield domestic industries, which makes binding climate commitments politically costly at home.";
pub const ALEX_POST_2: &str = "Carbon border adjustments could turn trade policy into a climate tool instead of a barrier.";
pub const AMY_POST_1: &str =
    "The prisoner's dilemma explains why countries defect from climate agreements: each gains by free riding while others cut emissions.";
pub const AMY_POST_2: &str = "Repeated negotiations let states build trust, so cooperation can emerge over time.";

pub const QUESTION: &str =
    "How can international frameworks address both the prisoner's dilemma and economic nationalism to foster climate cooperation?";

pub const EVIDENCE: [&str; 3] = [
    "Each state reasons that cutting emissions alone only hands an advantage to its rivals.",
    "Tariffs and subsidies protect domestic producers, and voters often reward leaders who put national industry first.",
    "Repeated negotiation rounds, transparency rules and peer review make promises easier to verify.",
];

fn aspect(keyword: &str, description: &str, span: &str) -> Value {
    json!({"keyword": keyword, "description": description, "original_text": span})
}

/// Post ids follow creation order: Alex 1 and 2, then Amy 3 and 4.
pub fn scenario_script() -> StubScript {
    StubScript::new()
        .on(
            TemplateId::Affinity,
            [json!({"relationships": [
                {"post_id": 2, "affinity_type": "Trade Policy", "relevance_score": 0.55, "relevance": "medium", "percentage": 55, "theme": "trade as a climate lever"},
                {"post_id": 3, "affinity_type": "Economic Theory Application", "relevance_score": 0.86, "relevance": "high", "percentage": 86, "theme": "incentives that undermine cooperation"},
                {"post_id": 4, "affinity_type": "none", "relevance_score": 0.2, "relevance": "low", "percentage": 20, "theme": "trust building"}
            ]})],
        )
        .on(
            TemplateId::Summarization,
            [json!({"bullets": [
                "Countries defect from climate agreements because free riding pays.",
                "Cooperation fails when each state expects others to cut emissions."
            ]})],
        )
        .on(
            TemplateId::KeywordHighlighting,
            [json!({
                "distribution": {"similarity": 30, "contrastive": 45, "complementary": 25},
                "highlights": [
                    {"style": "similarity", "quote_card1": "climate commitments", "quote_card2": "climate agreements", "aspect": "binding international climate deals"},
                    {"style": "contrastive", "quote_card1": "Economic nationalism", "quote_card2": "prisoner's dilemma", "aspect": "domestic politics versus strategic incentives"},
                    {"style": "complementary", "quote_card1": "domestic industries", "quote_card2": "free riding", "aspect": "why states hold back on emission cuts"}
                ]
            })],
        )
        .on(
            TemplateId::AspectExtraction,
            [json!({
                "card1": [
                    aspect("Economic Nationalism", "putting national industry ahead of shared goals", "Economic nationalism"),
                    aspect("Domestic Protection", "shielding home producers from competition", "shield domestic industries"),
                    aspect("Political Cost", "commitments that cost leaders votes", "politically costly")
                ],
                "card2": [
                    aspect("Game Theory Dynamics", "strategic choices where defection pays individually", "prisoner's dilemma"),
                    aspect("Free Riding", "benefiting from others' emission cuts", "free riding"),
                    aspect("Defection", "leaving agreements when it pays", "defect from climate agreements")
                ]
            })],
        )
        .on(TemplateId::InspiringQuestion, [json!({"question": QUESTION})])
        .on(
            TemplateId::Evidence,
            [json!({"evidence": [
                {"key_concept": "Defection Incentive", "excerpt": EVIDENCE[0], "connection": "mirrors the prisoner's dilemma"},
                {"key_concept": "Protectionism", "excerpt": EVIDENCE[1], "connection": "shows economic nationalism at work"},
                {"key_concept": "Verification", "excerpt": EVIDENCE[2], "connection": "a framework that changes incentives"}
            ]})],
        )
        .on(
            TemplateId::DiscussionOverview,
            [json!({
                "topics": [{"keyword": "Free Riding", "summary": "Why states defect.", "suggestion": "Link to enforcement."}],
                "high_engagement": ["Trade"],
                "low_engagement": ["Enforcement"],
                "hot_spots": [{"paragraph_index": 2, "keyword": "Protectionism"}]
            })],
        )
        .on(
            TemplateId::DiscussionAnalysis,
            [json!({
                "keywords": ["Nationalism", "Cooperation"],
                "summary": "You discussed how protecting domestic industry clashes with climate cooperation.",
                "suggestion": "You could bring the enforcement paragraph into class discussion."
            })],
        )
}

/// Sends one JSON request and returns the status and the parsed body
/// (a JSON string when the body is not JSON).
pub async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()));
    (status, value)
}
