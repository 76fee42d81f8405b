#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use robocap::embedding::{Embedder, HashEmbedder, DEFAULT_EMBED_DIM};
use robocap::episode::{load_episode, Episode};
use robocap::pipeline::Backends;
use robocap::synthetic::{write_episode, SyntheticSpec};
use robocap::vlm::{ChatBackend, RetryPolicy, ScriptedBackend, VlmClient};

pub fn synthetic_episode(dir: &Path, id: &str, frames: usize) -> Episode {
    write_episode(dir, &SyntheticSpec::new(id, frames).task("door_opening")).unwrap();
    load_episode(dir).unwrap()
}

pub fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        base_delay: std::time::Duration::from_millis(1),
        max_delay: std::time::Duration::from_millis(4),
        ..RetryPolicy::default()
    }
}

pub fn backends_with(backend: Arc<dyn ChatBackend>) -> Backends {
    let vlm = VlmClient::new(backend).with_retry(fast_retry());
    let embedder = Embedder::new(Arc::new(HashEmbedder::new(DEFAULT_EMBED_DIM, 0)), DEFAULT_EMBED_DIM);
    Backends::new(Arc::new(vlm), Arc::new(embedder))
}

pub fn mock_backends() -> (Backends, Arc<ScriptedBackend>) {
    let scripted = Arc::new(ScriptedBackend::with_fallback());
    (backends_with(scripted.clone()), scripted)
}

/// Relative path → bytes for every file below `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Minimal HTTP/1.1 server standing in for a chat-completions or embeddings
/// endpoint. Every connection is answered by `handler(path, body)` and then
/// closed.
pub struct StubServer {
    pub base_url: String,
    pub hits: Arc<std::sync::atomic::AtomicUsize>,
    /// `Authorization` header of every request, empty when absent.
    pub auth: Arc<std::sync::Mutex<Vec<String>>>,
}

impl StubServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&str, &[u8]) -> (u16, String) + Send + Sync + 'static,
    {
        use std::io::{BufRead, BufReader, Read, Write};
        use std::sync::atomic::Ordering;

        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let hits = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let handler = Arc::new(handler);
        let counter = Arc::clone(&hits);
        let auth = Arc::new(std::sync::Mutex::new(Vec::new()));
        let seen_auth = Arc::clone(&auth);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let handler = Arc::clone(&handler);
                let counter = Arc::clone(&counter);
                let seen_auth = Arc::clone(&seen_auth);
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut request_line = String::new();
                    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                        return;
                    }
                    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
                    let mut length = 0usize;
                    let mut authorization = String::new();
                    loop {
                        let mut line = String::new();
                        reader.read_line(&mut line).unwrap();
                        let line = line.trim_end();
                        if line.is_empty() {
                            break;
                        }
                        if let Some((name, value)) = line.split_once(':') {
                            if name.eq_ignore_ascii_case("content-length") {
                                length = value.trim().parse().unwrap();
                            } else if name.eq_ignore_ascii_case("authorization") {
                                authorization = value.trim().to_string();
                            }
                        }
                    }
                    let mut body = vec![0u8; length];
                    reader.read_exact(&mut body).unwrap();
                    seen_auth.lock().unwrap().push(authorization);
                    counter.fetch_add(1, Ordering::SeqCst);
                    let (status, reply) = handler(&path, &body);
                    let mut stream = stream;
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                        reply.len()
                    );
                    let _ = stream.flush();
                });
            }
        });
        Self { base_url, hits, auth }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(std::sync::atomic::Ordering::SeqCst)
    }
}

/// Chat-completions reply whose content is a pure function of the request
/// body.
pub fn chat_reply(body: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    const PHRASES: [&str; 4] = [
        "The robot arm reaches toward the door handle",
        "The robot arm grasps the handle and turns it",
        "The robot arm pulls the door open",
        "The robot arm releases the handle and retracts",
    ];
    let digest = Sha256::digest(body);
    let phrase = PHRASES[digest[0] as usize % PHRASES.len()];
    let text = format!("{phrase} (ref {}).", hex::encode(&digest[..4]));
    serde_json::json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
    })
    .to_string()
}
