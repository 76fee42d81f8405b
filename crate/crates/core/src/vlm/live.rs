use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{BackendError, BackendKind, BackendReply, CacheKey, ChatBackend, ChatRequest};
use crate::prompt::PromptPart;

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            api_key: None,
            timeout: Duration::from_secs(120),
        }
    }
}

/// Chat-completions over HTTP, images inlined as base64 data URLs.
#[derive(Debug)]
pub struct LiveBackend {
    client: Client,
    endpoint: String,
    api_key: Option<String>,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Fatal(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: config.api_key,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

/// Request body in the chat-completions message shape.
pub fn request_body(request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    PromptPart::Text(t) => json!({"type": "text", "text": t}),
                    PromptPart::Image(img) => json!({
                        "type": "image_url",
                        "image_url": {"url": img.data_url()}
                    }),
                })
                .collect();
            json!({"role": m.role.as_str(), "content": content})
        })
        .collect();
    json!({
        "model": request.model_id,
        "temperature": request.temperature,
        "messages": messages,
    })
}

/// Pulls `choices[0].message.content`, which may be a string or a list of
/// text parts.
pub fn response_text(body: &Value) -> Option<String> {
    let content = body.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => {
            let text: Vec<&str> = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            (!text.is_empty()).then(|| text.join(""))
        }
        _ => None,
    }
}

fn classify_status(status: StatusCode, body: &str) -> BackendError {
    let msg = format!("HTTP {status}: {}", body.chars().take(300).collect::<String>());
    match status.as_u16() {
        401 | 403 => BackendError::Auth(msg),
        408 | 409 | 425 | 429 => BackendError::Transient(msg),
        s if s >= 500 => BackendError::Transient(msg),
        _ => BackendError::Fatal(msg),
    }
}

impl ChatBackend for LiveBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn send(&self, request: &ChatRequest, _key: &CacheKey) -> Result<BackendReply, BackendError> {
        let mut builder = self.client.post(&self.endpoint).json(&request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Fatal(e.to_string())
            }
        })?;
        let status = response.status();
        let body = response
            .text()
            .map_err(|e| BackendError::Transient(format!("reading body: {e}")))?;
        if !status.is_success() {
            return Err(classify_status(status, &body));
        }
        let parsed: Value = serde_json::from_str(&body)
            .map_err(|e| BackendError::Fatal(format!("response is not JSON: {e}")))?;
        let text = response_text(&parsed)
            .ok_or_else(|| BackendError::Fatal("response has no message content".into()))?;
        Ok(BackendReply {
            text,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::EncodedImage;
    use crate::vlm::{ChatMessage, Role};
    use std::sync::Arc;

    #[test]
    fn body_has_chat_completions_shape() {
        let req = ChatRequest {
            model_id: "vlm".into(),
            temperature: 0.0,
            messages: vec![ChatMessage {
                role: Role::User,
                parts: vec![
                    PromptPart::Text("hi".into()),
                    PromptPart::Image(Arc::new(EncodedImage {
                        media_type: "image/png",
                        width: 1,
                        height: 1,
                        bytes: vec![1, 2, 3],
                    })),
                ],
            }],
            request_tag: "t".into(),
        };
        let body = request_body(&req);
        assert_eq!(body["model"], "vlm");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"][0]["type"], "text");
        assert_eq!(
            body["messages"][0]["content"][1]["image_url"]["url"],
            "data:image/png;base64,AQID"
        );
    }

    #[test]
    fn parses_string_and_part_content() {
        let a = json!({"choices": [{"message": {"content": "caption"}}]});
        assert_eq!(response_text(&a).as_deref(), Some("caption"));
        let b = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(response_text(&b).as_deref(), Some("ab"));
        assert_eq!(response_text(&json!({"choices": []})), None);
    }

    #[test]
    fn status_classes() {
        assert!(matches!(classify_status(StatusCode::UNAUTHORIZED, ""), BackendError::Auth(_)));
        assert!(matches!(
            classify_status(StatusCode::TOO_MANY_REQUESTS, ""),
            BackendError::Transient(_)
        ));
        assert!(matches!(
            classify_status(StatusCode::BAD_GATEWAY, ""),
            BackendError::Transient(_)
        ));
        assert!(matches!(classify_status(StatusCode::BAD_REQUEST, ""), BackendError::Fatal(_)));
    }
}
