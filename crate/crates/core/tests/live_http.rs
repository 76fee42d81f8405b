//! HTTP backends against a local stub server.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::{chat_reply, fast_retry, StubServer};
use robocap::embedding::{EmbedError, EmbeddingBackend, LiveEmbedder};
use robocap::prompt::{AblationCondition, PromptPart, RenderedPrompt, Stage};
use robocap::vlm::{ChatRequest, LiveBackend, LiveConfig, VlmClient, VlmError};

fn request(text: &str) -> ChatRequest {
    let prompt = RenderedPrompt {
        stage: Stage::ImageCaption,
        condition: AblationCondition::NoState,
        parts: vec![PromptPart::Text(text.to_string())],
    };
    ChatRequest::from_prompt("test-model", &prompt, "image_caption/ep/none/0")
}

fn client(server: &StubServer, api_key: Option<&str>) -> VlmClient {
    let live = LiveBackend::new(LiveConfig {
        base_url: server.base_url.clone(),
        api_key: api_key.map(str::to_string),
        ..LiveConfig::default()
    })
    .unwrap();
    VlmClient::new(Arc::new(live)).with_retry(fast_retry())
}

#[test]
fn rate_limited_calls_are_retried() {
    let seen = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&seen);
    let server = StubServer::start(move |_, body| {
        if counter.fetch_add(1, Ordering::SeqCst) < 2 {
            (429, r#"{"error":"slow down"}"#.to_string())
        } else {
            (200, chat_reply(body))
        }
    });
    let vlm = client(&server, Some("sk-test"));
    let response = vlm.complete(&request("describe")).unwrap();
    assert!(response.text.starts_with("The robot arm"), "{}", response.text);
    assert_eq!(server.hits(), 3);
    assert_eq!(vlm.stats().wire_calls, 3);
    assert!(server.auth.lock().unwrap().iter().all(|h| h == "Bearer sk-test"));
}

#[test]
fn auth_failures_are_not_retried() {
    let server = StubServer::start(|_, _| (401, r#"{"error":"bad key"}"#.to_string()));
    let err = client(&server, Some("wrong")).complete(&request("describe")).unwrap_err();
    assert!(matches!(err, VlmError::Auth(_)), "{err}");
    assert_eq!(err.class(), "auth");
    assert_eq!(server.hits(), 1);
}

#[test]
fn server_errors_exhaust_retries() {
    let server = StubServer::start(|_, _| (503, "{}".to_string()));
    let err = client(&server, None).complete(&request("describe")).unwrap_err();
    assert!(matches!(err, VlmError::RetriesExhausted { attempts: 5, .. }), "{err}");
    assert_eq!(server.hits(), 5);
    assert!(server.auth.lock().unwrap().iter().all(String::is_empty));
}

#[test]
fn client_errors_fail_immediately() {
    let server = StubServer::start(|_, _| (400, r#"{"error":"bad request"}"#.to_string()));
    let err = client(&server, None).complete(&request("describe")).unwrap_err();
    assert!(matches!(err, VlmError::Backend(_)), "{err}");
    assert_eq!(server.hits(), 1);
}

#[test]
fn list_content_is_joined() {
    let server = StubServer::start(|path, body| {
        assert_eq!(path, "/v1/chat/completions");
        let sent: serde_json::Value = serde_json::from_slice(body).unwrap();
        assert_eq!(sent["model"], "test-model");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["messages"][0]["content"][0]["text"], "describe");
        let reply = serde_json::json!({
            "choices": [{"message": {"content": [
                {"type": "text", "text": "The arm "},
                {"type": "text", "text": "opens the door."}
            ]}}]
        });
        (200, reply.to_string())
    });
    let response = client(&server, None).complete(&request("describe")).unwrap();
    assert_eq!(response.text, "The arm opens the door.");
}

#[test]
fn missing_content_is_a_backend_error() {
    let server = StubServer::start(|_, _| (200, r#"{"choices":[]}"#.to_string()));
    let err = client(&server, None).complete(&request("describe")).unwrap_err();
    assert!(matches!(err, VlmError::Backend(_)), "{err}");
}

#[test]
fn embeddings_endpoint_orders_by_index() {
    let server = StubServer::start(|path, body| {
        assert_eq!(path, "/v1/embeddings");
        let sent: serde_json::Value = serde_json::from_slice(body).unwrap();
        assert_eq!(sent["model"], "embed-test");
        assert_eq!(sent["input"].as_array().unwrap().len(), 2);
        // Out of order on purpose.
        let reply = serde_json::json!({
            "data": [
                {"index": 1, "embedding": [0.0, 1.0, 0.5]},
                {"index": 0, "embedding": [1.0, 0.0, 0.5]}
            ]
        });
        (200, reply.to_string())
    });
    let embedder = LiveEmbedder::new(&server.base_url, "embed-test", Some("ek".into())).unwrap();
    let vectors = embedder.embed_batch(&["first".into(), "second".into()]).unwrap();
    assert_eq!(vectors, vec![vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.5]]);
    assert_eq!(server.auth.lock().unwrap().as_slice(), ["Bearer ek"]);
}

#[test]
fn embeddings_http_error_is_reported() {
    let server = StubServer::start(|_, _| (500, r#"{"error":"down"}"#.to_string()));
    let embedder = LiveEmbedder::new(&server.base_url, "embed-test", None).unwrap();
    let err = embedder.embed_batch(&["x".into()]).unwrap_err();
    assert!(matches!(err, EmbedError::Backend(ref m) if m.contains("500")), "{err}");
}
