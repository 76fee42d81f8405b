use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, FixtureRecord};
use crate::prompt::PromptPart;

const KEY_DOMAIN: &[u8] = b"robocap/chat-key/v1";

/// SHA-256 over the model id, temperature and every message part.
///
/// Each field is length-prefixed, so no two distinct requests serialize to
/// the same byte stream. The request tag is metadata and is not hashed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn of(request: &ChatRequest) -> Self {
        let mut h = Sha256::new();
        h.update(KEY_DOMAIN);
        put_bytes(&mut h, request.model_id.as_bytes());
        h.update(request.temperature.to_bits().to_be_bytes());
        h.update((request.messages.len() as u64).to_be_bytes());
        for message in &request.messages {
            put_bytes(&mut h, message.role.as_str().as_bytes());
            h.update((message.parts.len() as u64).to_be_bytes());
            for part in &message.parts {
                match part {
                    PromptPart::Text(t) => {
                        h.update(b"T");
                        put_bytes(&mut h, t.as_bytes());
                    }
                    PromptPart::Image(img) => {
                        h.update(b"I");
                        put_bytes(&mut h, img.media_type.as_bytes());
                        put_bytes(&mut h, &img.bytes);
                    }
                }
            }
        }
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn from_digest(digest: impl Into<String>) -> Self {
        CacheKey(digest.into())
    }

    pub fn digest(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn put_bytes(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_be_bytes());
    h.update(bytes);
}

/// Successful responses by [`CacheKey`]. Entries are never evicted.
///
/// The on-disk layout is `<dir>/<first two hex digits>/<digest>.json`, one
/// [`FixtureRecord`] per file, written atomically.
#[derive(Debug)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, FixtureRecord>>,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            memory: Mutex::new(HashMap::new()),
            write_lock: Mutex::new(()),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            memory: Mutex::new(HashMap::new()),
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path_for(dir: &Path, key: &CacheKey) -> PathBuf {
        let d = key.digest();
        dir.join(&d[..2.min(d.len())]).join(format!("{d}.json"))
    }

    pub fn get(&self, key: &CacheKey) -> std::io::Result<Option<FixtureRecord>> {
        if let Some(hit) = self.memory.lock().unwrap().get(key.digest()) {
            return Ok(Some(hit.clone()));
        }
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = Self::path_for(dir, key);
        match fs::read(&path) {
            Ok(bytes) => {
                let record: FixtureRecord = serde_json::from_slice(&bytes).map_err(|e| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}: {e}", path.display()),
                    )
                })?;
                self.memory
                    .lock()
                    .unwrap()
                    .insert(key.digest().to_string(), record.clone());
                Ok(Some(record))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(&self, key: &CacheKey, record: &FixtureRecord) -> std::io::Result<()> {
        let _guard = self.write_lock.lock().unwrap();
        if let Some(dir) = &self.dir {
            let path = Self::path_for(dir, key);
            let parent = path.parent().expect("cache path has a parent");
            fs::create_dir_all(parent)?;
            let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
            let mut body = serde_json::to_vec_pretty(record).map_err(std::io::Error::other)?;
            body.push(b'\n');
            tmp.write_all(&body)?;
            tmp.persist(&path).map_err(|e| e.error)?;
        }
        self.memory
            .lock()
            .unwrap()
            .insert(key.digest().to_string(), record.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.dir {
            Some(dir) => walk_json(dir),
            None => self.memory.lock().unwrap().len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn walk_json(dir: &Path) -> usize {
    let Ok(entries) = fs::read_dir(dir) else {
        return 0;
    };
    entries
        .flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk_json(&p)
            } else {
                usize::from(p.extension().is_some_and(|x| x == "json"))
            }
        })
        .sum()
}
