mod common;

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mmchat_chatd::{router, ServiceEnv};

use common::*;

fn app(dir: &std::path::Path, static_dir: Option<&std::path::Path>) -> Router {
    let d = retriever().config().d_joint;
    // Every turn clears a threshold of -2, so each reply carries an image.
    let m = manager(dir, engine(index(&["img_a"], &[vec![1.0; d]]), -2.0));
    router(Arc::new(m), static_dir)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (
        s,
        if b.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&b).unwrap()
        },
    )
}

#[tokio::test]
async fn full_session_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);

    let (s, v) = call_json(
        &app,
        "POST",
        "/api/sessions",
        Some(json!({"model_tag": "multimodal_retriever"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let id = v["session_id"].as_str().unwrap().to_string();

    let (s, v) = call_json(
        &app,
        "POST",
        &format!("/api/sessions/{id}/message"),
        Some(json!({"text": "hi my dog"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["response"].is_string());
    assert_eq!(v["image_id"], "img_a");
    assert!(v["score"].as_f64().unwrap() > -1.0);

    let (s, png) = call(&app, "GET", "/api/images/img_a", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[..4], b"\x89PNG");
    let (s, _) = call(&app, "GET", "/api/images/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let eval = |f: i64| json!({"turn": 1, "fluency": f, "coherence": 4, "image_groundedness": 3});
    let (s, _) = call(&app, "POST", &format!("/api/sessions/{id}/turn-eval"), Some(eval(5))).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, v) = call_json(&app, "POST", &format!("/api/sessions/{id}/turn-eval"), Some(eval(6))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("fluency"));

    let (s, v) = call_json(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v.get("model_tag").is_none());
    assert_eq!(v["turns"].as_array().unwrap().len(), 2);
    assert_eq!(v["turns"][1]["eval"]["fluency"], 5);
    assert_eq!(v["closed"], false);

    let close = json!({"engagingness": 4, "humanness": 3});
    let (s, _) = call(&app, "POST", &format!("/api/sessions/{id}/close"), Some(close.clone())).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&app, "POST", &format!("/api/sessions/{id}/close"), Some(close)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/message"),
        Some(json!({"text": "hello"})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, v) = call_json(&app, "GET", "/api/results/summary", None).await;
    assert_eq!(s, StatusCode::OK);
    let row = &v["rows"][0];
    assert_eq!(row["model_tag"], "multimodal_retriever");
    assert_eq!(row["fluency"], 5.0);
    assert_eq!(row["image_groundedness"], 3.0);
    assert_eq!(row["engagingness"], 4.0);

    let saved: Value = serde_json::from_slice(&std::fs::read(dir.path().join(format!("{id}.json"))).unwrap()).unwrap();
    assert_eq!(saved["session_eval"]["humanness"], 3);
    assert!(saved["closed_at"].is_u64());
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (s, _) = call_json(&app, "GET", "/api/results/summary", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call_json(&app, "POST", "/api/sessions", Some(json!({"model_tag": "gpt2"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("gpt2"));
    let (s, _) = call_json(
        &app,
        "POST",
        "/api/sessions/missing/message",
        Some(json!({"text": "hi"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, v) = call_json(&app, "POST", "/api/sessions", Some(json!({"model_tag": "unimodal"}))).await;
    let id = v["session_id"].as_str().unwrap();
    let (s, _) = call_json(
        &app,
        "POST",
        &format!("/api/sessions/{id}/message"),
        Some(json!({"text": " "})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = call_json(
        &app,
        "POST",
        &format!("/api/sessions/{id}/message"),
        Some(json!({"text": "hi"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert!(v.get("image_id").is_none() && v.get("score").is_none());
    let bad_turn = json!({"turn": 0, "fluency": 3, "coherence": 3});
    let (s, _) = call_json(&app, "POST", &format!("/api/sessions/{id}/turn-eval"), Some(bad_turn)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    // Groundedness before any image was shown.
    let early = json!({"turn": 1, "fluency": 3, "coherence": 3, "image_groundedness": 2});
    let (s, _) = call_json(&app, "POST", &format!("/api/sessions/{id}/turn-eval"), Some(early)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn static_assets_are_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let web = tempfile::tempdir().unwrap();
    std::fs::write(web.path().join("index.html"), "<html>chat</html>").unwrap();
    let app = app(dir.path(), Some(web.path()));
    let (s, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>chat</html>");
    let (s, _) = call(&app, "GET", "/", None).await;
    assert_eq!(s, StatusCode::OK);
}

#[test]
fn service_env_defaults_and_overrides() {
    let env = ServiceEnv::from_vars(None, None).unwrap();
    assert_eq!(env.port, 8080);
    assert_eq!(env.sessions_dir(), PathBuf::from("data/sessions"));
    let env = ServiceEnv::from_vars(Some("/srv/chat".into()), Some("9000".into())).unwrap();
    assert_eq!(env.port, 9000);
    assert_eq!(env.data_dir, PathBuf::from("/srv/chat"));
    assert!(ServiceEnv::from_vars(None, Some("http".into())).is_err());
}
