use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::CacheKey;

pub const FIXTURE_FORMAT: &str = "robocap-fixture";
const FIXTURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot access fixture {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed fixture {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

/// One recorded response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub text: String,
    pub timestamp: String,
    pub model_id: String,
    #[serde(default)]
    pub request_tag: String,
}

/// Digest → response index. Serialized with sorted keys so identical contents
/// give identical bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureArchive {
    format: String,
    version: u32,
    entries: BTreeMap<String, FixtureRecord>,
}

impl FixtureArchive {
    pub fn new() -> Self {
        Self {
            format: FIXTURE_FORMAT.to_string(),
            version: FIXTURE_VERSION,
            entries: BTreeMap::new(),
        }
    }

    /// Adds a record. When the digest is already present the record with the
    /// smaller request tag wins, so insertion order never changes the result.
    pub fn insert(&mut self, key: &CacheKey, record: FixtureRecord) {
        match self.entries.get(key.digest()) {
            Some(existing) if existing.request_tag <= record.request_tag => {}
            _ => {
                self.entries.insert(key.digest().to_string(), record);
            }
        }
    }

    pub fn get(&self, digest: &str) -> Option<&FixtureRecord> {
        self.entries.get(digest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &FixtureRecord)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn merge(&mut self, other: &FixtureArchive) {
        for (digest, record) in &other.entries {
            self.insert(&CacheKey::from_digest(digest.clone()), record.clone());
        }
    }

    /// Entries of `self` whose digest is absent from `other`.
    pub fn difference(&self, other: &FixtureArchive) -> FixtureArchive {
        let mut out = FixtureArchive::new();
        for (digest, record) in &self.entries {
            if !other.entries.contains_key(digest) {
                out.entries.insert(digest.clone(), record.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("fixture serializes");
        out.push(b'\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), FixtureError> {
        let io = |source| FixtureError::Io {
            path: path.to_path_buf(),
            source,
        };
        let parent = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io)?;
        tmp.write_all(&self.to_bytes()).map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let bytes = fs::read(path).map_err(|source| FixtureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let archive: FixtureArchive =
            serde_json::from_slice(&bytes).map_err(|e| FixtureError::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        if archive.format != FIXTURE_FORMAT || archive.version != FIXTURE_VERSION {
            return Err(FixtureError::Malformed {
                path: path.to_path_buf(),
                reason: format!(
                    "unsupported format {} v{}",
                    archive.format, archive.version
                ),
            });
        }
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(text: &str, tag: &str) -> FixtureRecord {
        FixtureRecord {
            text: text.into(),
            timestamp: "1970-01-01T00:00:00Z".into(),
            model_id: "m".into(),
            request_tag: tag.into(),
        }
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let k1 = CacheKey::from_digest("01");
        let k2 = CacheKey::from_digest("02");
        let mut a = FixtureArchive::new();
        a.insert(&k1, rec("x", "b"));
        a.insert(&k1, rec("x", "a"));
        a.insert(&k2, rec("y", "c"));
        let mut b = FixtureArchive::new();
        b.insert(&k2, rec("y", "c"));
        b.insert(&k1, rec("x", "a"));
        b.insert(&k1, rec("x", "b"));
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.get("01").unwrap().request_tag, "a");
    }

    #[test]
    fn empty_archive_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        FixtureArchive::new().save(&path).unwrap();
        let loaded = FixtureArchive::load(&path).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn wrong_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        fs::write(&path, r#"{"format":"other","version":1,"entries":{}}"#).unwrap();
        assert!(matches!(
            FixtureArchive::load(&path),
            Err(FixtureError::Malformed { .. })
        ));
    }
}
