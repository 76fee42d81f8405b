//! Caption embeddings and cosine similarity.
//!
//! Backends produce raw vectors; [`Embedder`] checks them (dimension,
//! finiteness, non-zero norm) and logs every text → vector pair so a run can
//! be replayed without the embedding service. All arithmetic is `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::vlm::{BackendKind, InFlightLimiter};

pub const DEFAULT_EMBED_DIM: usize = 768;
pub const DEFAULT_EMBED_MODEL: &str = "sentence-transformers/stsb-xlm-r-multilingual";
const EMBED_FIXTURE_FORMAT: &str = "robocap-embeddings";
const BATCH_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text {index} is empty")]
    EmptyText { index: usize },
    #[error("embedding backend failed: {0}")]
    Backend(String),
    #[error("no recorded embedding for text {index} (digest {digest})")]
    ReplayMiss { index: usize, digest: String },
    #[error("backend returned {actual} vectors for {expected} texts")]
    CountMismatch { expected: usize, actual: usize },
    #[error("vector {index} has dimension {actual}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("vector {index} contains a non-finite value")]
    NonFinite { index: usize },
    #[error("vector {index} has zero norm")]
    ZeroVector { index: usize },
    #[error("similarity needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("embedding fixture {path}: {reason}")]
    Fixture { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_text_digest: String,
}

impl EmbeddingVector {
    /// Builds a vector after checking it is finite and non-zero.
    pub fn new(values: Vec<f64>, source_text_digest: String) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite { index: 0 });
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(EmbedError::ZeroVector { index: 0 });
        }
        Ok(Self {
            values,
            source_text_digest,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// `values[j] = cos(e_j, e_{j+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySeries {
    pub values: Vec<f64>,
    pub caption_count: usize,
}

impl SimilaritySeries {
    /// Series over a single caption: no pairs, one segment.
    pub fn single() -> Self {
        Self {
            values: Vec::new(),
            caption_count: 1,
        }
    }

    /// Wraps precomputed values. `caption_count` is `values.len() + 1`.
    pub fn from_values(values: Vec<f64>) -> Self {
        let caption_count = values.len() + 1;
        Self {
            values,
            caption_count,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Cosine similarity, accumulated in `f64` and clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    cosine(&u.values, &v.values)
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimensionMismatch {
            index: 1,
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 {
        return Err(EmbedError::ZeroVector { index: 0 });
    }
    if nv == 0.0 {
        return Err(EmbedError::ZeroVector { index: 1 });
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

pub fn similarity_series(vectors: &[EmbeddingVector]) -> Result<SimilaritySeries, EmbedError> {
    if vectors.len() < 2 {
        return Err(EmbedError::TooFewVectors(vectors.len()));
    }
    let values = vectors
        .windows(2)
        .enumerate()
        .map(|(j, w)| {
            cosine_similarity(&w[0], &w[1]).map_err(|e| match e {
                EmbedError::ZeroVector { index } => EmbedError::ZeroVector { index: j + index },
                EmbedError::DimensionMismatch {
                    expected, actual, ..
                } => EmbedError::DimensionMismatch {
                    index: j + 1,
                    expected,
                    actual,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimilaritySeries {
        values,
        caption_count: vectors.len(),
    })
}

pub trait EmbeddingBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn model(&self) -> &str;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

/// Deterministic offline embedder.
///
/// Every lowercase word is hashed (with the seed) into a Gaussian direction;
/// a text's vector is the normalized sum over its words. Texts that share
/// words point in similar directions, which is enough structure for
/// segmentation tests.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    model: String,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            model: format!("hash-bow-{dim}-{seed}"),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let lowered = text.to_lowercase();
        let mut tokens: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push(lowered.as_str());
        }
        let mut acc = vec![0.0f64; self.dim];
        for token in tokens {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(token.as_bytes());
            let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
            for slot in acc.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *slot += g;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        acc
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Text digest → vector store. Written per run and usable for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFixture {
    format: String,
    pub model: String,
    pub dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingFixture {
    pub fn new(model: impl Into<String>, dim: usize) -> Self {
        Self {
            format: EMBED_FIXTURE_FORMAT.to_string(),
            model: model.into(),
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, text: &str, values: Vec<f64>) {
        self.entries.insert(text_digest(text), values);
    }

    pub fn get_text(&self, text: &str) -> Option<&Vec<f64>> {
        self.entries.get(&text_digest(text))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn merge(&mut self, other: &EmbeddingFixture) {
        for (k, v) in &other.entries {
            self.entries.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("embedding fixture serializes");
        out.push(b'\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        crate::fsutil::write_atomic(path, &self.to_bytes()).map_err(|e| EmbedError::Fixture {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let err = |reason: String| EmbedError::Fixture {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        let fixture: EmbeddingFixture =
            serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        if fixture.format != EMBED_FIXTURE_FORMAT {
            return Err(err(format!("unsupported format {}", fixture.format)));
        }
        Ok(fixture)
    }
}

#[derive(Debug, Clone)]
pub struct ReplayEmbedder {
    fixture: EmbeddingFixture,
}

impl ReplayEmbedder {
    pub fn new(fixture: EmbeddingFixture) -> Self {
        Self { fixture }
    }
}

impl EmbeddingBackend for ReplayEmbedder {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn model(&self) -> &str {
        &self.fixture.model
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.fixture
                    .get_text(t)
                    .cloned()
                    .ok_or_else(|| EmbedError::ReplayMiss {
                        index,
                        digest: text_digest(t),
                    })
            })
            .collect()
    }
}

/// OpenAI-style `/embeddings` endpoint (also served by common
/// sentence-transformers servers).
#[derive(Debug)]
pub struct LiveEmbedder {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl LiveEmbedder {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EmbedError::Backend(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
        })
    }
}

impl EmbeddingBackend for LiveEmbedder {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&json!({"model": self.model, "input": texts}));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedError::Backend(e.to_string()))?;
        let status = resp.status();
        let body: Value = resp.json().map_err(|e| EmbedError::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(EmbedError::Backend(format!("HTTP {status}: {body}")));
        }
        let mut rows: Vec<(usize, Vec<f64>)> = body
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Backend("response has no `data` array".into()))?
            .iter()
            .enumerate()
            .map(|(pos, item)| {
                let index = item
                    .get("index")
                    .and_then(Value::as_u64)
                    .map(|i| i as usize)
                    .unwrap_or(pos);
                let values = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| EmbedError::Backend("item has no `embedding`".into()))?
                    .iter()
                    .map(|v| {
                        v.as_f64()
                            .ok_or_else(|| EmbedError::Backend("non-numeric embedding".into()))
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                Ok((index, values))
            })
            .collect::<Result<_, EmbedError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

/// Validating front end over an [`EmbeddingBackend`].
pub struct Embedder {
    backend: Arc<dyn EmbeddingBackend>,
    dim: usize,
    limiter: Arc<InFlightLimiter>,
    log: Mutex<EmbeddingFixture>,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder")
            .field("backend", &self.backend.kind())
            .field("model", &self.backend.model())
            .field("dim", &self.dim)
            .finish()
    }
}

impl Embedder {
    pub fn new(backend: Arc<dyn EmbeddingBackend>, dim: usize) -> Self {
        let log = EmbeddingFixture::new(backend.model(), dim);
        Self {
            backend,
            dim,
            limiter: Arc::new(InFlightLimiter::new(crate::vlm::DEFAULT_CONCURRENCY)),
            log: Mutex::new(log),
        }
    }

    pub fn with_limiter(mut self, limiter: Arc<InFlightLimiter>) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model(&self) -> &str {
        self.backend.model()
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    /// Everything embedded so far, as a replay fixture.
    pub fn session_fixture(&self) -> EmbeddingFixture {
        self.log.lock().unwrap().clone()
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText { index });
        }
        let mut out = Vec::with_capacity(texts.len());
        for (batch_no, batch) in texts.chunks(BATCH_SIZE).enumerate() {
            let raw = {
                let _slot = self.limiter.acquire();
                self.backend.embed_batch(batch)?
            };
            if raw.len() != batch.len() {
                return Err(EmbedError::CountMismatch {
                    expected: batch.len(),
                    actual: raw.len(),
                });
            }
            for (i, (text, values)) in batch.iter().zip(raw).enumerate() {
                let index = batch_no * BATCH_SIZE + i;
                if values.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch {
                        index,
                        expected: self.dim,
                        actual: values.len(),
                    });
                }
                let vector = EmbeddingVector::new(values, text_digest(text)).map_err(|e| match e {
                    EmbedError::NonFinite { .. } => EmbedError::NonFinite { index },
                    EmbedError::ZeroVector { .. } => EmbedError::ZeroVector { index },
                    other => other,
                })?;
                self.log.lock().unwrap().insert(text, vector.values.clone());
                out.push(vector);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), String::new()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let mut e1 = vec![0.0; 768];
        e1[0] = 1.0;
        assert_eq!(cosine(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // <(1,2,2),(2,1,2)> = 8, both norms 3.
        let c = cosine_similarity(&v(&[1.0, 2.0, 2.0]), &v(&[2.0, 1.0, 2.0])).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&[1.0, 0.0], &[1.0]),
            Err(EmbedError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(EmbedError::ZeroVector { index: 0 })
        ));
        assert!(matches!(
            EmbeddingVector::new(vec![0.0; 3], String::new()),
            Err(EmbedError::ZeroVector { .. })
        ));
    }

    #[test]
    fn series_examples() {
        let same: Vec<_> = (0..29).map(|_| v(&[0.3, 0.4])).collect();
        let s = similarity_series(&same).unwrap();
        assert_eq!(s.len(), 28);
        assert_eq!(s.caption_count, 29);
        assert!(s.values.iter().all(|x| (*x - 1.0).abs() < 1e-15));

        let alternating: Vec<_> = (0..6)
            .map(|i| if i % 2 == 0 { v(&[1.0, 0.0]) } else { v(&[0.0, 2.0]) })
            .collect();
        assert_eq!(similarity_series(&alternating).unwrap().values, vec![0.0; 5]);

        assert!(matches!(
            similarity_series(&[v(&[1.0])]),
            Err(EmbedError::TooFewVectors(1))
        ));
    }

    #[test]
    fn hash_embedder_is_deterministic_unit_and_768d() {
        let e = Embedder::new(Arc::new(HashEmbedder::new(DEFAULT_EMBED_DIM, 7)), DEFAULT_EMBED_DIM);
        let texts: Vec<String> = (0..29).map(|i| format!("caption number {i}")).collect();
        let out = e.embed(&texts).unwrap();
        assert_eq!(out.len(), 29);
        assert!(out.iter().all(|v| v.dim() == 768));
        let norm: f64 = out[0].values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        let dup = e.embed(&["same text".into(), "same text".into()]).unwrap();
        assert_eq!(dup[0], dup[1]);
    }

    #[test]
    fn shared_words_raise_similarity() {
        let h = HashEmbedder::new(768, 1);
        let a = h.embed_one("the robot arm lifts the cereal box");
        let b = h.embed_one("the robot arm lifts the cereal box upward");
        let c = h.embed_one("door handle rotates");
        assert!(cosine(&a, &b).unwrap() > cosine(&a, &c).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let e = Embedder::new(Arc::new(HashEmbedder::new(512, 0)), 768);
        assert!(matches!(
            e.embed(&["x".into()]),
            Err(EmbedError::DimensionMismatch {
                index: 0,
                expected: 768,
                actual: 512
            })
        ));
    }

    #[test]
    fn empty_text_rejected() {
        let e = Embedder::new(Arc::new(HashEmbedder::new(8, 0)), 8);
        assert!(matches!(
            e.embed(&["a".into(), " ".into()]),
            Err(EmbedError::EmptyText { index: 1 })
        ));
    }

    #[test]
    fn replay_reproduces_recorded_vectors() {
        let live = Embedder::new(Arc::new(HashEmbedder::new(16, 3)), 16);
        let texts = vec!["alpha".to_string(), "beta".to_string()];
        let first = live.embed(&texts).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        live.session_fixture().save(&path).unwrap();
        let replay = Embedder::new(
            Arc::new(ReplayEmbedder::new(EmbeddingFixture::load(&path).unwrap())),
            16,
        );
        assert_eq!(replay.embed(&texts).unwrap(), first);
        assert!(matches!(
            replay.embed(&["gamma".into()]),
            Err(EmbedError::ReplayMiss { index: 0, .. })
        ));
    }
}
