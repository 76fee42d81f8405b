//! Vision-language chat completion client.
//!
//! [`VlmClient`] fronts one [`ChatBackend`] (live HTTP, fixture replay or a
//! scripted mock) and adds what every backend shares: content-addressed
//! response caching, retries for transient failures, a global cap on
//! in-flight wire calls, and a session log in the fixture format so any run
//! can be replayed later.

mod cache;
mod fixture;
mod limiter;
mod live;
mod mock;
mod replay;
mod retry;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{PromptPart, RenderedPrompt};

pub use cache::{CacheKey, ResponseCache};
pub use fixture::{FixtureArchive, FixtureError, FixtureRecord, FIXTURE_FORMAT};
pub use limiter::{InFlightGuard, InFlightLimiter};
pub use live::{LiveBackend, LiveConfig};
pub use mock::{synthetic_reply, ScriptedBackend, MOCK_TIMESTAMP};
pub use replay::ReplayBackend;
pub use retry::RetryPolicy;

pub const DEFAULT_MODEL_ID: &str = "gpt-4-vision-preview";
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Replay,
    Mock,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Live => "live",
            BackendKind::Replay => "replay",
            BackendKind::Mock => "mock",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(BackendKind::Live),
            "replay" => Ok(BackendKind::Replay),
            "mock" => Ok(BackendKind::Mock),
            other => Err(format!("unknown backend `{other}` (expected live, replay or mock)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<PromptPart>,
}

impl ChatMessage {
    pub fn user(prompt: &RenderedPrompt) -> Self {
        Self {
            role: Role::User,
            parts: prompt.parts.clone(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            parts: vec![PromptPart::Text(text.into())],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
    /// Stage, episode and chunk identifiers. Not part of the cache key.
    pub request_tag: String,
}

impl ChatRequest {
    /// Single-turn request at temperature zero.
    pub fn from_prompt(model_id: &str, prompt: &RenderedPrompt, tag: impl Into<String>) -> Self {
        Self {
            model_id: model_id.to_string(),
            temperature: 0.0,
            messages: vec![ChatMessage::user(prompt)],
            request_tag: tag.into(),
        }
    }

    pub fn key(&self) -> CacheKey {
        CacheKey::of(self)
    }

    pub fn image_count(&self) -> usize {
        self.messages
            .iter()
            .flat_map(|m| &m.parts)
            .filter(|p| matches!(p, PromptPart::Image(_)))
            .count()
    }

    /// Concatenated text of every text part, in order.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for part in self.messages.iter().flat_map(|m| &m.parts) {
            if let PromptPart::Text(t) = part {
                if !out.is_empty() {
                    out.push_str("\n\n");
                }
                out.push_str(t);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub backend: BackendKind,
    pub cache_hit: bool,
    pub latency_ms: u64,
    pub key: CacheKey,
    /// Record as it belongs in a request log.
    pub record: FixtureRecord,
}

/// What a backend returns for one successful call.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    /// Timeouts, rate limiting, 5xx. Retried.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("no recorded response for request `{tag}` (digest {digest})")]
    ReplayMiss { tag: String, digest: String },
    #[error("backend rejected request: {0}")]
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("replay miss for request `{tag}` (digest {digest})")]
    ReplayMiss { tag: String, digest: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("backend returned an empty response for `{0}`")]
    EmptyResponse(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl VlmError {
    /// Stable short name for logs and CLI error lines.
    pub fn class(&self) -> &'static str {
        match self {
            VlmError::RetriesExhausted { .. } => "retries_exhausted",
            VlmError::Auth(_) => "auth",
            VlmError::ReplayMiss { .. } => "replay_miss",
            VlmError::Backend(_) => "backend",
            VlmError::EmptyResponse(_) => "empty_response",
            VlmError::Cache(_) => "cache",
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn send(&self, request: &ChatRequest, key: &CacheKey) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicUsize,
    cache_hits: AtomicUsize,
    wire_calls: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClientStats {
    pub requests: usize,
    pub cache_hits: usize,
    /// Calls that reached the backend, retries included.
    pub wire_calls: usize,
}

pub struct VlmClient {
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    limiter: Arc<InFlightLimiter>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    session: Mutex<FixtureArchive>,
    counters: Counters,
}

impl fmt::Debug for VlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VlmClient")
            .field("backend", &self.backend.kind())
            .field("cache", &self.cache)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl VlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            limiter: Arc::new(InFlightLimiter::new(DEFAULT_CONCURRENCY)),
            key_locks: Mutex::new(HashMap::new()),
            session: Mutex::new(FixtureArchive::new()),
            counters: Counters::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: Arc<InFlightLimiter>) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn limiter(&self) -> &Arc<InFlightLimiter> {
        &self.limiter
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            requests: self.counters.requests.load(Ordering::SeqCst),
            cache_hits: self.counters.cache_hits.load(Ordering::SeqCst),
            wire_calls: self.counters.wire_calls.load(Ordering::SeqCst),
        }
    }

    /// Every exchange completed by this client so far.
    pub fn session_archive(&self) -> FixtureArchive {
        self.session.lock().unwrap().clone()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, VlmError> {
        let started = Instant::now();
        self.counters.requests.fetch_add(1, Ordering::SeqCst);
        let key = request.key();

        // Identical requests in flight at the same time share one wire call.
        let key_lock = self.key_lock(&key);
        let _key_guard = key_lock.lock().unwrap();

        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                let record = FixtureRecord {
                    request_tag: request.request_tag.clone(),
                    ..hit
                };
                return Ok(self.finish(key, record, true, started));
            }
        }

        let reply = self.send_with_retry(request, &key)?;
        if reply.text.trim().is_empty() {
            return Err(VlmError::EmptyResponse(request.request_tag.clone()));
        }
        let record = FixtureRecord {
            text: reply.text,
            timestamp: reply.timestamp,
            model_id: request.model_id.clone(),
            request_tag: request.request_tag.clone(),
        };
        if let Some(cache) = &self.cache {
            cache.put(&key, &record)?;
        }
        Ok(self.finish(key, record, false, started))
    }

    fn finish(
        &self,
        key: CacheKey,
        record: FixtureRecord,
        cache_hit: bool,
        started: Instant,
    ) -> ChatResponse {
        self.session.lock().unwrap().insert(&key, record.clone());
        ChatResponse {
            text: record.text.clone(),
            backend: self.backend.kind(),
            cache_hit,
            latency_ms: started.elapsed().as_millis() as u64,
            key,
            record,
        }
    }

    fn key_lock(&self, key: &CacheKey) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().unwrap();
        Arc::clone(locks.entry(key.digest().to_string()).or_default())
    }

    fn send_with_retry(
        &self,
        request: &ChatRequest,
        key: &CacheKey,
    ) -> Result<BackendReply, VlmError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.retry.delay(attempt);
                log::warn!(
                    "retrying `{}` (attempt {}/{attempts}) after {delay:?}: {last}",
                    request.request_tag,
                    attempt + 1
                );
                std::thread::sleep(delay);
            }
            let result = {
                let _slot = self.limiter.acquire();
                self.counters.wire_calls.fetch_add(1, Ordering::SeqCst);
                self.backend.send(request, key)
            };
            match result {
                Ok(reply) => return Ok(reply),
                Err(BackendError::Transient(msg)) => last = msg,
                Err(BackendError::Auth(msg)) => return Err(VlmError::Auth(msg)),
                Err(BackendError::ReplayMiss { tag, digest }) => {
                    return Err(VlmError::ReplayMiss { tag, digest })
                }
                Err(BackendError::Fatal(msg)) => return Err(VlmError::Backend(msg)),
            }
        }
        Err(VlmError::RetriesExhausted { attempts, last })
    }
}

/// Runs `f` against `client` and returns everything it exchanged, ready to be
/// written as a replay fixture.
pub fn record_session<T, E>(
    client: &VlmClient,
    f: impl FnOnce(&VlmClient) -> Result<T, E>,
) -> Result<(T, FixtureArchive), E> {
    let before = client.session_archive();
    let out = f(client)?;
    let after = client.session_archive();
    Ok((out, after.difference(&before)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn text_request(text: &str, tag: &str) -> ChatRequest {
        ChatRequest {
            model_id: "m".into(),
            temperature: 0.0,
            messages: vec![ChatMessage {
                role: Role::User,
                parts: vec![PromptPart::Text(text.into())],
            }],
            request_tag: tag.into(),
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(2),
            ..RetryPolicy::default()
        }
    }

    #[test]
    fn second_identical_request_is_a_cache_hit() {
        let backend = Arc::new(ScriptedBackend::with_fallback());
        let client = VlmClient::new(backend.clone()).with_cache(ResponseCache::in_memory());
        let req = text_request("describe", "t1");
        let a = client.complete(&req).unwrap();
        let b = client.complete(&req).unwrap();
        assert!(!a.cache_hit);
        assert!(b.cache_hit);
        assert_eq!(a.text, b.text);
        assert_eq!(backend.calls(), 1);
        assert_eq!(client.stats().wire_calls, 1);
    }

    #[test]
    fn scripted_text_is_returned_verbatim() {
        let req = text_request("describe", "t1");
        let backend = ScriptedBackend::new().script(req.key().digest(), "robot grasps the handle");
        let client = VlmClient::new(Arc::new(backend));
        assert_eq!(client.complete(&req).unwrap().text, "robot grasps the handle");
    }

    #[test]
    fn replay_miss_names_request_tag() {
        let client = VlmClient::new(Arc::new(ReplayBackend::new(FixtureArchive::new())));
        match client.complete(&text_request("x", "image_caption/ep1/3")) {
            Err(VlmError::ReplayMiss { tag, .. }) => assert_eq!(tag, "image_caption/ep1/3"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transient_errors_are_retried_until_success() {
        let backend = ScriptedBackend::with_fallback()
            .fail_transient_times(2);
        let backend = Arc::new(backend);
        let client = VlmClient::new(backend.clone()).with_retry(fast_retry());
        let resp = client.complete(&text_request("x", "t")).unwrap();
        assert!(!resp.text.is_empty());
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn retries_exhaust_after_max_attempts() {
        let backend = Arc::new(ScriptedBackend::with_fallback().fail_transient_times(10));
        let client = VlmClient::new(backend.clone()).with_retry(fast_retry());
        match client.complete(&text_request("x", "t")) {
            Err(VlmError::RetriesExhausted { attempts: 5, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(backend.calls(), 5);
    }

    #[test]
    fn auth_errors_surface_immediately() {
        let backend = Arc::new(ScriptedBackend::new().fail_with(BackendError::Auth("bad key".into())));
        let client = VlmClient::new(backend.clone()).with_retry(fast_retry());
        assert!(matches!(
            client.complete(&text_request("x", "t")),
            Err(VlmError::Auth(_))
        ));
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn record_session_captures_only_new_exchanges() {
        let client = VlmClient::new(Arc::new(ScriptedBackend::with_fallback()));
        client.complete(&text_request("before", "a")).unwrap();
        let ((), archive) = record_session(&client, |c| {
            c.complete(&text_request("one", "b"))?;
            c.complete(&text_request("two", "c"))?;
            Ok::<_, VlmError>(())
        })
        .unwrap();
        assert_eq!(archive.len(), 2);
        let ((), empty) =
            record_session(&client, |_| Ok::<_, VlmError>(())).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn concurrent_identical_requests_hit_the_wire_once() {
        let backend = Arc::new(ScriptedBackend::with_fallback());
        let client = VlmClient::new(backend.clone()).with_cache(ResponseCache::in_memory());
        let req = text_request("same", "t");
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| client.complete(&req).unwrap());
            }
        });
        assert_eq!(backend.calls(), 1);
        assert_eq!(client.stats().cache_hits, 7);
    }

    #[test]
    fn backend_kind_parses() {
        assert_eq!("replay".parse::<BackendKind>().unwrap(), BackendKind::Replay);
        assert!("wire".parse::<BackendKind>().is_err());
    }
}
