use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use circle_cli::server::router;
use circle_core::config::RunConfig;
use circle_core::corpus::DocumentStore;
use circle_core::pipeline::TrainedPipeline;
use circle_core::retrieval::{Bm25Index, Bm25Params};
use circle_core::simulator::{FixtureGenerator, GeneratorKind, GeneratorSpec, SessionStore};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixture_store() -> Arc<SessionStore> {
    let mut d = DocumentStore::new();
    d.insert("c1", "jaguar car engine with a long description of the engine").unwrap();
    d.insert("a1", "jaguar animal fur").unwrap();
    d.insert("o1", "jaguar operating system").unwrap();
    let idx = Bm25Index::build(&d, Bm25Params::default()).unwrap();
    let map = [
        ("jaguar".to_string(), vec!["jaguar car".to_string(), "jaguar animal".to_string()]),
        ("jaguar car".to_string(), vec!["jaguar car engine".to_string(), "jaguar car price".to_string()]),
        ("jaguar animal".to_string(), vec!["jaguar animal fur".to_string(), "jaguar animal habitat".to_string()]),
    ]
    .into();
    let g = FixtureGenerator { id: "fixture".into(), k: 2, map };
    Arc::new(SessionStore::new(Arc::new(g), Arc::new(idx), Arc::new(d), 100, 2, 0))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_owned()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn create(app: &Router, query: &str) -> Value {
    let (status, v) = call(app, Method::POST, "/api/sessions", Some(&json!({ "query": query }).to_string())).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v
}

fn sid(v: &Value) -> String {
    v["session_id"].as_str().unwrap().to_owned()
}

#[tokio::test]
async fn health_answers() {
    let app = router(fixture_store());
    let (status, v) = call(&app, Method::GET, "/api/health", None).await;
    assert_eq!((status, v), (StatusCode::OK, json!({ "status": "ok" })));
}

#[tokio::test]
async fn create_returns_suggestions_and_a_ranking() {
    let app = router(fixture_store());
    let v = create(&app, "jaguar").await;
    assert_eq!(v["turn"], 0);
    assert_eq!(v["suggestions"], json!(["jaguar car", "jaguar animal"]));
    let ranking = v["ranking"].as_array().unwrap();
    assert_eq!(ranking.len(), 2, "display depth caps the ranking");
    for r in ranking {
        assert!(r["doc_id"].is_string() && r["score"].is_f64());
        assert!(r["snippet"].as_str().unwrap().starts_with("jaguar"));
    }
}

#[tokio::test]
async fn select_then_inspect_shows_the_next_turn() {
    let app = router(fixture_store());
    let id = sid(&create(&app, "jaguar").await);
    let (status, v) = call(&app, Method::POST, &format!("/api/sessions/{id}/select"), Some(r#"{"index": 0}"#)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["turn"], 1);
    assert_eq!(v["suggestions"], json!(["jaguar car engine", "jaguar car price"]));
    assert_eq!(v["ranking"][0]["doc_id"], "c1");

    let (status, s) = call(&app, Method::GET, &format!("/api/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["state"]["selected"], json!(["jaguar car"]));
    assert_eq!(s["turns"][0]["chosen"], 0);
    assert_eq!(s["turns"][1]["query"], "jaguar car");
    assert_eq!(s["status"], "open");
}

#[tokio::test]
async fn bad_requests_leave_the_session_untouched() {
    let app = router(fixture_store());
    let id = sid(&create(&app, "jaguar").await);
    let uri = format!("/api/sessions/{id}");
    let (_, before) = call(&app, Method::GET, &uri, None).await;

    let select = format!("{uri}/select");
    for body in [r#"{"index": 99}"#, r#"{"index": -1}"#, r#"{"index": "0"}"#, r#"{"idx": 0}"#, "not json"] {
        let (status, v) = call(&app, Method::POST, &select, Some(body)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert!(v["error"].is_string(), "{body}: {v}");
    }
    let (_, after) = call(&app, Method::GET, &uri, None).await;
    assert_eq!(before, after);

    let (status, _) = call(&app, Method::POST, "/api/sessions", Some(r#"{"query": "   "}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn unknown_sessions_are_not_found() {
    let app = router(fixture_store());
    for (m, uri, body) in [
        (Method::GET, "/api/sessions/deadbeef", None),
        (Method::DELETE, "/api/sessions/deadbeef", None),
        (Method::POST, "/api/sessions/deadbeef/select", Some(r#"{"index": 0}"#)),
    ] {
        let (status, v) = call(&app, m, uri, body).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert!(v["error"].as_str().unwrap().contains("deadbeef"));
    }
}

#[tokio::test]
async fn closed_sessions_stay_readable_but_refuse_selections() {
    let app = router(fixture_store());
    let id = sid(&create(&app, "jaguar").await);
    let (status, _) = call(&app, Method::DELETE, &format!("/api/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, s) = call(&app, Method::GET, &format!("/api/sessions/{id}"), None).await;
    assert_eq!((status, s["status"].as_str()), (StatusCode::OK, Some("closed")));
    let (status, _) = call(&app, Method::POST, &format!("/api/sessions/{id}/select"), Some(r#"{"index": 0}"#)).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn interleaved_sessions_are_isolated() {
    let store = fixture_store();
    let app = router(Arc::clone(&store));
    let a = sid(&create(&app, "jaguar").await);
    let b = sid(&create(&app, "jaguar").await);
    assert_ne!(a, b);
    call(&app, Method::POST, &format!("/api/sessions/{a}/select"), Some(r#"{"index": 1}"#)).await;
    call(&app, Method::POST, &format!("/api/sessions/{b}/select"), Some(r#"{"index": 0}"#)).await;
    let (_, va) = call(&app, Method::GET, &format!("/api/sessions/{a}"), None).await;
    let (_, vb) = call(&app, Method::GET, &format!("/api/sessions/{b}"), None).await;
    assert_eq!(va["state"]["selected"], json!(["jaguar animal"]));
    assert_eq!(vb["state"]["selected"], json!(["jaguar car"]));
    assert_eq!(store.export_jsonl().lines().count(), 2);
}

#[tokio::test]
async fn trained_model_serves_k_suggestions() {
    let mut cfg = RunConfig::default();
    cfg.corpus.toy.n_topics = 4;
    cfg.corpus.toy.held_out_topics = 1;
    cfg.model.d_model = 32;
    cfg.model.d_ff = 64;
    cfg.sft.epochs = 40;
    let p = tokio::task::spawn_blocking(move || TrainedPipeline::train(&cfg, false, false).unwrap()).await.unwrap();
    let g = p.factory().build(&GeneratorSpec::new(GeneratorKind::Supervised, 2)).unwrap();
    let query = p.bundle.dev_queries()[0].initial_query.clone();
    let store = SessionStore::new(g.into(), p.index.clone(), Arc::new(p.bundle.store.clone()), 100, 5, 0);
    let app = router(Arc::new(store));
    let v = create(&app, &query).await;
    let shown = v["suggestions"].as_array().unwrap();
    assert!(!shown.is_empty() && shown.len() <= 2, "{v}");
    assert_eq!(v["ranking"].as_array().unwrap().len(), 5);
    let (status, next) = call(&app, Method::POST, &format!("/api/sessions/{}/select", sid(&v)), Some(r#"{"index": 0}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(next["turn"], 1);
}
