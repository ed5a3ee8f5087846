mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use tgdial::generator::DecodeSettings;
use tgdial::serve::{router, AppState, DEFAULT_IDLE_TIMEOUT};

fn app_with(timeout: Duration) -> (Router, Arc<AppState>) {
    let t = common::tiny(32, 4);
    let settings = DecodeSettings {
        max_len: 12,
        ..DecodeSettings::default()
    };
    let state = Arc::new(AppState::new(t.model, t.vocab, t.inventory, settings, timeout).unwrap());
    (router(Arc::clone(&state)), state)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn session_body() -> Value {
    json!({
        "profile": {"name": "gus", "residence": "oslo", "liked star": "ruben okafor"},
        "knowledge": [["wandering mirror", "starring", "ruben okafor"], ["ruben okafor", "born in", "oslo"]],
        "target": {"type": "movie recommendation", "topic": "wandering mirror"}
    })
}

async fn create(app: &Router) -> String {
    let (status, v) = call(app, Method::POST, "/session", Some(session_body())).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

/// Numbers compare within 1e-9, everything else exactly.
fn assert_json_matches(got: &Value, want: &Value, path: &str) {
    match (got, want) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!((a - b).abs() <= 1e-9, "{path}: {a} vs {b}");
        }
        (Value::Object(a), Value::Object(b)) => {
            let ka: Vec<_> = a.keys().collect();
            let kb: Vec<_> = b.keys().collect();
            assert_eq!(ka, kb, "{path}: keys differ");
            for (k, v) in a {
                assert_json_matches(v, &b[k], &format!("{path}.{k}"));
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            assert_eq!(a.len(), b.len(), "{path}: lengths differ");
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                assert_json_matches(x, y, &format!("{path}[{i}]"));
            }
        }
        _ => assert_eq!(got, want, "{path}"),
    }
}

#[tokio::test]
async fn scripted_exchange_matches_recording() {
    let (app, _) = app_with(DEFAULT_IDLE_TIMEOUT);
    let id = create(&app).await;
    let mut replies = Vec::new();
    for (i, text) in ["hello !", "who is that ?", "tell me more ."]
        .into_iter()
        .enumerate()
    {
        let (status, v) = call(
            &app,
            Method::POST,
            &format!("/session/{id}/utterance"),
            Some(json!({"text": text})),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{v}");
        let reply = v["reply"].as_str().unwrap();
        let achieved = reply.contains("wandering mirror");
        assert_eq!(v["achieved"], json!(achieved));
        assert_eq!(v["bias_top"].as_array().unwrap().len(), 10);
        let panel = &v["keywords"];
        let n_types = panel["type"].as_array().unwrap().len();
        assert!(n_types > 0);
        assert!(
            panel["topic"]
                .as_array()
                .unwrap()
                .iter()
                .filter(|e| e["picked"] == json!(true))
                .count()
                >= 1
        );

        let (status, t) = call(&app, Method::GET, &format!("/session/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let turns = t["turns"].as_array().unwrap();
        assert_eq!(turns.len(), 2 * (i + 1));
        assert_eq!(turns[2 * i], json!({"speaker": "user", "text": text}));
        assert_eq!(turns[2 * i + 1]["speaker"], json!("system"));
        assert_eq!(turns[2 * i + 1]["text"], v["reply"]);
        replies.push(v);
    }
    let (_, mut transcript) = call(&app, Method::GET, &format!("/session/{id}"), None).await;
    transcript["id"] = json!("<id>");
    let got = json!({"replies": replies, "transcript": transcript});

    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/serve_exchange.json");
    if std::env::var_os("TGDIAL_RECORD").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap()).unwrap();
    }
    let want: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_json_matches(&got, &want, "$");
}

#[tokio::test]
async fn unknown_target_is_a_field_error() {
    let (app, _) = app_with(DEFAULT_IDLE_TIMEOUT);
    let mut body = session_body();
    body["target"]["topic"] = json!("no such topic");
    let (status, v) = call(&app, Method::POST, "/session", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], json!("target.topic"));

    let mut body = session_body();
    body["target"]["type"] = json!("juggling");
    let (status, v) = call(&app, Method::POST, "/session", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], json!("target.type"));
}

#[tokio::test]
async fn malformed_bodies_are_rejected() {
    let (app, _) = app_with(DEFAULT_IDLE_TIMEOUT);
    let (status, v) = call(&app, Method::POST, "/session", Some(json!({"profile": {}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("target"), "{v}");

    let mut body = session_body();
    body["profile"]["age"] = json!(31);
    let (status, v) = call(&app, Method::POST, "/session", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], json!("profile.age"));

    let id = create(&app).await;
    let (status, v) = call(
        &app,
        Method::POST,
        &format!("/session/{id}/utterance"),
        Some(json!({"text": "   "})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], json!("text"));
    let (_, t) = call(&app, Method::GET, &format!("/session/{id}"), None).await;
    assert!(t["turns"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn delete_and_missing_sessions() {
    let (app, state) = app_with(DEFAULT_IDLE_TIMEOUT);
    let id = create(&app).await;
    assert_eq!(state.session_count(), 1);
    let (status, _) = call(&app, Method::DELETE, &format!("/session/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert_eq!(state.session_count(), 0);
    let (status, _) = call(&app, Method::GET, &format!("/session/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, "/session/not-a-uuid", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(
        &app,
        Method::POST,
        &format!("/session/{id}/utterance"),
        Some(json!({"text": "hi"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let (app, state) = app_with(Duration::from_millis(50));
    let id = create(&app).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (status, _) = call(&app, Method::GET, &format!("/session/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(state.session_count(), 0);
}

#[tokio::test]
async fn sessions_are_independent() {
    let (app, _) = app_with(DEFAULT_IDLE_TIMEOUT);
    let a = create(&app).await;
    let b = create(&app).await;
    assert_ne!(a, b);
    call(
        &app,
        Method::POST,
        &format!("/session/{a}/utterance"),
        Some(json!({"text": "hello !"})),
    )
    .await;
    let (_, ta) = call(&app, Method::GET, &format!("/session/{a}"), None).await;
    let (_, tb) = call(&app, Method::GET, &format!("/session/{b}"), None).await;
    assert_eq!(ta["turns"].as_array().unwrap().len(), 2);
    assert!(tb["turns"].as_array().unwrap().is_empty());
}
