#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::State;
use axum::http::{Request, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Sends one request to the router and decodes a JSON body (Null if empty).
pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_with(app, method, uri, body, None).await
}

pub async fn call_with(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

type Reply = Arc<dyn Fn(&str) -> String + Send + Sync>;

#[derive(Clone)]
struct MockState {
    captured: Arc<Mutex<Vec<String>>>,
    reply: Reply,
}

async fn chat(State(s): State<MockState>, body: String) -> Json<Value> {
    s.captured.lock().unwrap().push(body.clone());
    let parsed: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
    let prompt = parsed["messages"][0]["content"].as_str().unwrap_or_default();
    Json(json!({ "choices": [{ "message": { "role": "assistant", "content": (s.reply)(prompt) } }] }))
}

/// A chat-completions upstream recording every raw request body.
pub struct MockUpstream {
    pub url: String,
    pub captured: Arc<Mutex<Vec<String>>>,
}

impl MockUpstream {
    pub async fn start(reply: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        let captured = Arc::new(Mutex::new(Vec::new()));
        let state = MockState {
            captured: captured.clone(),
            reply: Arc::new(reply),
        };
        let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(state);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Self { url, captured }
    }

    pub fn bodies(&self) -> Vec<String> {
        self.captured.lock().unwrap().clone()
    }
}
