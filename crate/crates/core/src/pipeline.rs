//! End-to-end run of one episode under one ablation condition.
//!
//! Stages run in order and each one is checkpointed in the run directory
//! before the next starts:
//!
//! | stage            | artifact                                   |
//! |------------------|--------------------------------------------|
//! | `sample`         | `sampled.json`                             |
//! | `image_captions` | `image_captions.jsonl`                     |
//! | `scene_captions` | `scene_captions.jsonl`                     |
//! | `summary`        | `summary.txt`                              |
//! | `instruction`    | `final_caption.txt`                        |
//! | `embeddings`     | `embeddings.tsv`, `embedding_log.json`     |
//! | `segmentation`   | `similarity.tsv`, `segmentation.json`, `boundaries.jsonl`, `sweep.tsv` |
//!
//! `requests.json` holds every chat exchange of the run in the fixture
//! format and is rewritten after each chat stage. `manifest.json` records the
//! config, its digest and the completed stages.
//!
//! The run directory is `<root>/runs/<episode>/<condition>-<digest prefix>`,
//! so changing any output-affecting setting lands in a fresh directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{
    similarity_series, EmbedError, Embedder, EmbeddingFixture, EmbeddingVector, SimilaritySeries,
    DEFAULT_EMBED_DIM, DEFAULT_EMBED_MODEL,
};
use crate::episode::{load_episode, sample_frames, Episode, IngestError, SampleError, DEFAULT_STRIDE};
use crate::fsutil::{read_json, write_atomic, write_json};
use crate::imaging::{ImageStore, DEFAULT_MAX_EDGE};
use crate::prompt::{
    attach_captions, build_image_caption_prompt, build_instruction_prompt,
    build_scene_caption_prompt, build_summary_prompt, chunk, AblationCondition, PromptConfig,
    PromptError, PromptTemplates, SceneChunk, Stage, DEFAULT_CHUNK_SIZE, DEFAULT_PRECISION,
};
use crate::segmentation::{
    annotate_boundaries, segment, sweep, SegmentError, SegmentationResult, SweepCurve,
    ThresholdGrid, DEFAULT_THRESHOLD,
};
use crate::vlm::{
    BackendKind, ChatMessage, ChatRequest, FixtureArchive, VlmClient, VlmError, DEFAULT_CONCURRENCY,
    DEFAULT_MODEL_ID,
};

const RUN_FORMAT: &str = "robocap-run";
const MANIFEST: &str = "manifest.json";
const REQUEST_LOG: &str = "requests.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{stage} stage failed: {source}")]
    Vlm {
        stage: &'static str,
        #[source]
        source: VlmError,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config digest {found} does not match run directory digest {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("corrupted checkpoint in {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
}

impl PipelineError {
    /// Error class for CLI reporting: `data`, `backend`, `config` or `io`.
    pub fn class(&self) -> &'static str {
        match self {
            PipelineError::Ingest(_)
            | PipelineError::Sample(_)
            | PipelineError::Prompt(_)
            | PipelineError::Segment(_)
            | PipelineError::CorruptCheckpoint { .. } => "data",
            PipelineError::Vlm { .. } | PipelineError::Embed(_) => "backend",
            PipelineError::InvalidConfig(_) | PipelineError::ConfigMismatch { .. } => "config",
            PipelineError::Io { .. } => "io",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which captions feed the embedding and segmentation stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSource {
    #[default]
    ImageCaptions,
    /// Experimental.
    SceneCaptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stride: usize,
    pub offset: usize,
    pub k: usize,
    pub condition: AblationCondition,
    /// Threshold for the reported segmentation.
    pub threshold: f64,
    /// Sweep grid, strictly ascending. TOML accepts a list or a
    /// `start:end:step` string.
    #[serde(deserialize_with = "thresholds_from_list_or_grid")]
    pub thresholds: Vec<f64>,
    pub precision: usize,
    pub max_image_edge: u32,
    pub model_id: String,
    pub embed_model: String,
    pub embed_dim: usize,
    pub few_shot: String,
    pub segment_on: SegmentSource,
    /// Template file; the built-in set when absent.
    pub templates: Option<PathBuf>,
    /// Parallel image/scene caption requests. Does not affect outputs.
    pub concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
            offset: 0,
            k: DEFAULT_CHUNK_SIZE,
            condition: AblationCondition::Both,
            threshold: DEFAULT_THRESHOLD,
            thresholds: ThresholdGrid::default().values(),
            precision: DEFAULT_PRECISION,
            max_image_edge: DEFAULT_MAX_EDGE,
            model_id: DEFAULT_MODEL_ID.to_string(),
            embed_model: DEFAULT_EMBED_MODEL.to_string(),
            embed_dim: DEFAULT_EMBED_DIM,
            few_shot: String::new(),
            segment_on: SegmentSource::ImageCaptions,
            templates: None,
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

/// The config fields that determine outputs, plus the template digest.
#[derive(Serialize)]
struct DigestView<'a> {
    stride: usize,
    offset: usize,
    k: usize,
    condition: AblationCondition,
    threshold: String,
    thresholds: Vec<String>,
    precision: usize,
    max_image_edge: u32,
    model_id: &'a str,
    embed_model: &'a str,
    embed_dim: usize,
    few_shot: &'a str,
    segment_on: SegmentSource,
    templates: String,
}

fn thresholds_from_list_or_grid<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Spec {
        List(Vec<f64>),
        Grid(String),
    }
    match Spec::deserialize(d)? {
        Spec::List(values) => Ok(values),
        Spec::Grid(text) => text
            .parse::<ThresholdGrid>()
            .map(|g| g.values())
            .map_err(serde::de::Error::custom),
    }
}

impl RunConfig {
    pub fn with_condition(&self, condition: AblationCondition) -> Self {
        Self {
            condition,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if self.offset >= self.stride {
            return bad(format!("offset {} must be below stride {}", self.offset, self.stride));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [-1, 1]", self.threshold));
        }
        if self.thresholds.iter().any(|t| !(-1.0..=1.0).contains(t)) {
            return bad("sweep thresholds must lie in [-1, 1]".into());
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return bad("sweep thresholds must be strictly ascending".into());
        }
        if self.precision > 12 {
            return bad("precision above 12 digits is not supported".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if self.model_id.trim().is_empty() {
            return bad("model_id is empty".into());
        }
        Ok(())
    }

    pub fn load_templates(&self) -> Result<PromptTemplates, PipelineError> {
        match &self.templates {
            Some(path) => Ok(PromptTemplates::load(path)?),
            None => Ok(PromptTemplates::builtin()),
        }
    }

    pub fn prompt_config(&self) -> Result<PromptConfig, PipelineError> {
        Ok(PromptConfig {
            precision: self.precision,
            few_shot: self.few_shot.clone(),
            templates: Arc::new(self.load_templates()?),
        })
    }

    /// SHA-256 over every output-affecting setting.
    pub fn digest(&self) -> Result<String, PipelineError> {
        let view = DigestView {
            stride: self.stride,
            offset: self.offset,
            k: self.k,
            condition: self.condition,
            // Bit patterns, so the digest never depends on float formatting.
            threshold: format!("{:016x}", self.threshold.to_bits()),
            thresholds: self
                .thresholds
                .iter()
                .map(|t| format!("{:016x}", t.to_bits()))
                .collect(),
            precision: self.precision,
            max_image_edge: self.max_image_edge,
            model_id: &self.model_id,
            embed_model: &self.embed_model,
            embed_dim: self.embed_dim,
            few_shot: &self.few_shot,
            segment_on: self.segment_on,
            templates: self.load_templates()?.digest(),
        };
        let bytes = serde_json::to_vec(&view).expect("digest view serializes");
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::InvalidConfig(e.to_string()))
    }
}

/// Chat client, embedder and image payload cache shared by runs.
#[derive(Debug, Clone)]
pub struct Backends {
    pub vlm: Arc<VlmClient>,
    pub embedder: Arc<Embedder>,
    pub images: Arc<ImageStore>,
}

impl Backends {
    pub fn new(vlm: Arc<VlmClient>, embedder: Arc<Embedder>) -> Self {
        Self {
            vlm,
            embedder,
            images: Arc::new(ImageStore::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStage {
    Sample,
    ImageCaptions,
    SceneCaptions,
    Summary,
    Instruction,
    Embeddings,
    Segmentation,
}

impl RunStage {
    pub const ALL: [RunStage; 7] = [
        RunStage::Sample,
        RunStage::ImageCaptions,
        RunStage::SceneCaptions,
        RunStage::Summary,
        RunStage::Instruction,
        RunStage::Embeddings,
        RunStage::Segmentation,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub vlm: BackendKind,
    pub embedding: BackendKind,
    pub embedding_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub episode_id: String,
    pub task_label: Option<String>,
    pub episode_dir: PathBuf,
    pub config: RunConfig,
    pub config_digest: String,
    pub backends: BackendInfo,
    pub completed: BTreeSet<RunStage>,
}

impl RunManifest {
    pub fn is_complete(&self) -> bool {
        RunStage::ALL.iter().all(|s| self.completed.contains(s))
    }

    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(MANIFEST);
        let manifest: RunManifest = read_json(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                PipelineError::CorruptCheckpoint {
                    path: path.clone(),
                    reason: "manifest missing".into(),
                }
            } else {
                PipelineError::CorruptCheckpoint {
                    path: path.clone(),
                    reason: e.to_string(),
                }
            }
        })?;
        if manifest.format != RUN_FORMAT {
            return Err(PipelineError::CorruptCheckpoint {
                path,
                reason: format!("unexpected format `{}`", manifest.format),
            });
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCaptionRecord {
    pub position: usize,
    pub frame_index: u64,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCaptionRecord {
    pub chunk_index: usize,
    pub frame_indices: Vec<u64>,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRecord {
    pub episode_id: String,
    pub condition: AblationCondition,
    pub threshold: f64,
    pub boundary_index: usize,
    pub similarity: f64,
    pub caption_before: String,
    pub caption_after: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationFile {
    pub threshold: f64,
    pub result: SegmentationResult,
    pub sweep: Vec<SegmentationResult>,
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub episode_id: String,
    pub task_label: Option<String>,
    pub condition: AblationCondition,
    pub config_digest: String,
    pub sampled_indices: Vec<u64>,
    pub image_captions: Vec<String>,
    pub scene_captions: Vec<String>,
    pub summary: String,
    pub final_caption: String,
    pub embeddings: Vec<EmbeddingVector>,
    pub similarity: SimilaritySeries,
    pub segmentation: SegmentationResult,
    pub sweep_results: Vec<SegmentationResult>,
    pub sweep: SweepCurve,
    pub request_log: FixtureArchive,
}

pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// `<root>/runs/<episode>/<condition>-<first 12 digest chars>`.
pub fn run_dir_for(root: &Path, episode_id: &str, config: &RunConfig) -> Result<PathBuf, PipelineError> {
    let digest = config.digest()?;
    Ok(root
        .join("runs")
        .join(sanitize_id(episode_id))
        .join(format!("{}-{}", config.condition, &digest[..12])))
}

/// Runs (or finishes) `episode` under `config` inside `root`.
pub fn run_episode(
    episode: &Episode,
    config: &RunConfig,
    backends: &Backends,
    root: &Path,
) -> Result<RunArtifacts, PipelineError> {
    config.validate()?;
    let run_dir = run_dir_for(root, &episode.episode_id, config)?;
    let digest = config.digest()?;
    let manifest = if run_dir.join(MANIFEST).exists() {
        let manifest = RunManifest::load(&run_dir)?;
        if manifest.config_digest != digest {
            return Err(PipelineError::ConfigMismatch {
                expected: manifest.config_digest,
                found: digest,
            });
        }
        manifest
    } else {
        fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
        let manifest = RunManifest {
            format: RUN_FORMAT.to_string(),
            episode_id: episode.episode_id.clone(),
            task_label: episode.task_label.clone(),
            episode_dir: episode.source_dir.clone(),
            config: config.clone(),
            config_digest: digest,
            backends: backend_info(backends),
            completed: BTreeSet::new(),
        };
        write_json(&run_dir.join(MANIFEST), &manifest).map_err(io_err(&run_dir))?;
        manifest
    };
    Runner {
        run_dir,
        episode,
        config,
        backends,
        manifest,
    }
    .execute()
}

/// Finishes an interrupted run from its directory.
///
/// When `expected` is given, its digest must match the one the run was
/// started with.
pub fn resume(
    run_dir: &Path,
    backends: &Backends,
    expected: Option<&RunConfig>,
) -> Result<RunArtifacts, PipelineError> {
    let manifest = RunManifest::load(run_dir)?;
    let stored = manifest.config.digest()?;
    if stored != manifest.config_digest {
        return Err(PipelineError::CorruptCheckpoint {
            path: run_dir.join(MANIFEST),
            reason: "stored config does not hash to the recorded digest".into(),
        });
    }
    if let Some(expected) = expected {
        let found = expected.digest()?;
        if found != manifest.config_digest {
            return Err(PipelineError::ConfigMismatch {
                expected: manifest.config_digest,
                found,
            });
        }
    }
    manifest.config.validate()?;
    let episode = load_episode(&manifest.episode_dir)?;
    if episode.episode_id != manifest.episode_id {
        return Err(PipelineError::CorruptCheckpoint {
            path: run_dir.join(MANIFEST),
            reason: format!(
                "episode at {} is `{}`, run was for `{}`",
                manifest.episode_dir.display(),
                episode.episode_id,
                manifest.episode_id
            ),
        });
    }
    let config = manifest.config.clone();
    Runner {
        run_dir: run_dir.to_path_buf(),
        episode: &episode,
        config: &config,
        backends,
        manifest,
    }
    .execute()
}

/// One run per ablation condition, all other settings shared. A failing
/// condition does not stop the others.
pub fn run_ablation(
    episode: &Episode,
    base: &RunConfig,
    backends: &Backends,
    root: &Path,
) -> Vec<(AblationCondition, Result<RunArtifacts, PipelineError>)> {
    AblationCondition::ALL
        .iter()
        .map(|&c| {
            let result = run_episode(episode, &base.with_condition(c), backends, root);
            if let Err(e) = &result {
                log::error!("{} / {c}: {e}", episode.episode_id);
            }
            (c, result)
        })
        .collect()
}

fn backend_info(backends: &Backends) -> BackendInfo {
    BackendInfo {
        vlm: backends.vlm.backend_kind(),
        embedding: backends.embedder.backend_kind(),
        embedding_model: backends.embedder.model().to_string(),
    }
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

struct Runner<'a> {
    run_dir: PathBuf,
    episode: &'a Episode,
    config: &'a RunConfig,
    backends: &'a Backends,
    manifest: RunManifest,
}

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn done(&self, stage: RunStage) -> bool {
        self.manifest.completed.contains(&stage)
    }

    fn mark(&mut self, stage: RunStage) -> Result<(), PipelineError> {
        self.manifest.completed.insert(stage);
        let path = self.path(MANIFEST);
        write_json(&path, &self.manifest).map_err(io_err(&path))
    }

    fn tag(&self, stage: Stage, suffix: Option<usize>) -> String {
        let mut tag = format!(
            "{}/{}/{}",
            stage.as_str(),
            self.episode.episode_id,
            self.config.condition
        );
        if let Some(s) = suffix {
            let _ = write!(tag, "/{s}");
        }
        tag
    }

    fn load_request_log(&self) -> Result<FixtureArchive, PipelineError> {
        let path = self.path(REQUEST_LOG);
        if path.exists() {
            FixtureArchive::load(&path).map_err(|e| PipelineError::CorruptCheckpoint {
                path,
                reason: e.to_string(),
            })
        } else {
            Ok(FixtureArchive::new())
        }
    }

    fn save_request_log(&self, log: &FixtureArchive) -> Result<(), PipelineError> {
        let path = self.path(REQUEST_LOG);
        write_atomic(&path, &log.to_bytes()).map_err(io_err(&path))
    }

    fn complete(&self, request: &ChatRequest, stage: &'static str, log: &Mutex<FixtureArchive>) -> Result<String, PipelineError> {
        let response = self
            .backends
            .vlm
            .complete(request)
            .map_err(|source| PipelineError::Vlm { stage, source })?;
        log.lock().unwrap().insert(&response.key, response.record.clone());
        Ok(response.text.trim().to_string())
    }

    fn execute(mut self) -> Result<RunArtifacts, PipelineError> {
        let config = self.config;
        if self.backends.embedder.dim() != config.embed_dim {
            return Err(PipelineError::InvalidConfig(format!(
                "embedder produces {}-d vectors, config expects {}",
                self.backends.embedder.dim(),
                config.embed_dim
            )));
        }
        let prompt_config = config.prompt_config()?;
        let local_images;
        let images: &ImageStore = if self.backends.images.max_edge() == config.max_image_edge {
            &self.backends.images
        } else {
            local_images = ImageStore::new(config.max_image_edge);
            &local_images
        };
        let condition = config.condition;
        let request_log = Mutex::new(self.load_request_log()?);

        let sampled = sample_frames(self.episode, config.stride, config.offset)?;
        let sampled_indices = sampled.indices();
        if !self.done(RunStage::Sample) {
            let path = self.path("sampled.json");
            write_json(
                &path,
                &serde_json::json!({
                    "stride": config.stride,
                    "offset": config.offset,
                    "indices": sampled_indices,
                }),
            )
            .map_err(io_err(&path))?;
            self.mark(RunStage::Sample)?;
        } else {
            let path = self.path("sampled.json");
            let stored: serde_json::Value = read_json(&path).map_err(io_err(&path))?;
            let stored: Vec<u64> = serde_json::from_value(stored["indices"].clone()).unwrap_or_default();
            if stored != sampled_indices {
                return Err(PipelineError::CorruptCheckpoint {
                    path,
                    reason: "sampled indices no longer match the episode".into(),
                });
            }
        }

        // Image captions: one request per sampled frame.
        let image_captions: Vec<String> = if self.done(RunStage::ImageCaptions) {
            let records: Vec<ImageCaptionRecord> = self.read_jsonl("image_captions.jsonl")?;
            records.into_iter().map(|r| r.caption).collect()
        } else {
            let results = parallel_map(&sampled.frames, config.concurrency, |i, frame| {
                let prompt = build_image_caption_prompt(frame, condition, &prompt_config, images)?;
                let request = ChatRequest::from_prompt(
                    &config.model_id,
                    &prompt,
                    self.tag(Stage::ImageCaption, Some(i)),
                );
                self.complete(&request, "image_caption", &request_log)
            });
            self.save_request_log(&request_log.lock().unwrap())?;
            let captions = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            let records: Vec<ImageCaptionRecord> = captions
                .iter()
                .zip(&sampled.frames)
                .enumerate()
                .map(|(position, (caption, frame))| ImageCaptionRecord {
                    position,
                    frame_index: frame.index,
                    caption: caption.clone(),
                })
                .collect();
            self.write_jsonl("image_captions.jsonl", &records)?;
            self.mark(RunStage::ImageCaptions)?;
            captions
        };
        self.expect_len("image_captions.jsonl", image_captions.len(), sampled.len())?;

        let mut chunks: Vec<SceneChunk> = chunk(&sampled, config.k)?;
        attach_captions(&mut chunks, &image_captions);

        // Scene captions: one request per chunk of k frames.
        let scene_captions: Vec<String> = if self.done(RunStage::SceneCaptions) {
            let records: Vec<SceneCaptionRecord> = self.read_jsonl("scene_captions.jsonl")?;
            records.into_iter().map(|r| r.caption).collect()
        } else {
            let results = parallel_map(&chunks, config.concurrency, |m, c| {
                let prompt = build_scene_caption_prompt(c, condition, &prompt_config, images)?;
                let request = ChatRequest::from_prompt(
                    &config.model_id,
                    &prompt,
                    self.tag(Stage::SceneCaption, Some(m)),
                );
                self.complete(&request, "scene_caption", &request_log)
            });
            self.save_request_log(&request_log.lock().unwrap())?;
            let captions = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            let records: Vec<SceneCaptionRecord> = captions
                .iter()
                .zip(&chunks)
                .map(|(caption, c)| SceneCaptionRecord {
                    chunk_index: c.chunk_index,
                    frame_indices: c.frames.iter().map(|f| f.index).collect(),
                    caption: caption.clone(),
                })
                .collect();
            self.write_jsonl("scene_captions.jsonl", &records)?;
            self.mark(RunStage::SceneCaptions)?;
            captions
        };
        self.expect_len("scene_captions.jsonl", scene_captions.len(), chunks.len())?;

        // Summary, then the instruction as a follow-up turn.
        let summary_prompt =
            build_summary_prompt(&scene_captions, &chunks, condition, &prompt_config, images)?;
        let summary_request =
            ChatRequest::from_prompt(&config.model_id, &summary_prompt, self.tag(Stage::Summary, None));
        let summary = if self.done(RunStage::Summary) {
            self.read_text("summary.txt")?
        } else {
            let summary = self.complete(&summary_request, "summary", &request_log)?;
            self.save_request_log(&request_log.lock().unwrap())?;
            self.write_text("summary.txt", &summary)?;
            self.mark(RunStage::Summary)?;
            summary
        };

        let final_caption = if self.done(RunStage::Instruction) {
            self.read_text("final_caption.txt")?
        } else {
            let instruction_prompt = build_instruction_prompt(&summary, condition, &prompt_config)?;
            let mut request = summary_request.clone();
            request.request_tag = self.tag(Stage::Instruction, None);
            request.messages.push(ChatMessage::assistant(summary.clone()));
            request.messages.push(ChatMessage::user(&instruction_prompt));
            let caption = self.complete(&request, "instruction", &request_log)?;
            self.save_request_log(&request_log.lock().unwrap())?;
            self.write_text("final_caption.txt", &caption)?;
            self.mark(RunStage::Instruction)?;
            caption
        };

        let segment_texts = match config.segment_on {
            SegmentSource::ImageCaptions => &image_captions,
            SegmentSource::SceneCaptions => &scene_captions,
        };
        let embeddings = if self.done(RunStage::Embeddings) {
            self.read_embeddings(segment_texts)?
        } else {
            let vectors = self.backends.embedder.embed(segment_texts)?;
            let mut log = EmbeddingFixture::new(self.backends.embedder.model(), config.embed_dim);
            for (text, v) in segment_texts.iter().zip(&vectors) {
                log.insert(text, v.values.clone());
            }
            let log_path = self.path("embedding_log.json");
            log.save(&log_path)?;
            self.write_text_raw("embeddings.tsv", &embeddings_tsv(&vectors))?;
            self.mark(RunStage::Embeddings)?;
            vectors
        };

        let similarity = if embeddings.len() >= 2 {
            similarity_series(&embeddings)?
        } else {
            SimilaritySeries::single()
        };
        let segmentation = segment(&similarity, config.threshold)?;
        let sweep_curve = sweep(&similarity, &config.thresholds)?;
        let sweep_results = config
            .thresholds
            .iter()
            .map(|t| segment(&similarity, *t))
            .collect::<Result<Vec<_>, _>>()?;
        if !self.done(RunStage::Segmentation) {
            self.write_text_raw("similarity.tsv", &similarity_tsv(&similarity))?;
            let seg_path = self.path("segmentation.json");
            write_json(
                &seg_path,
                &SegmentationFile {
                    threshold: config.threshold,
                    result: segmentation.clone(),
                    sweep: sweep_results.clone(),
                },
            )
            .map_err(io_err(&seg_path))?;
            let report = annotate_boundaries(&segmentation, &similarity, segment_texts)?;
            let records: Vec<BoundaryRecord> = report
                .rows
                .into_iter()
                .map(|row| BoundaryRecord {
                    episode_id: self.episode.episode_id.clone(),
                    condition,
                    threshold: config.threshold,
                    boundary_index: row.boundary_index,
                    similarity: row.similarity,
                    caption_before: row.caption_before,
                    caption_after: row.caption_after,
                })
                .collect();
            self.write_jsonl("boundaries.jsonl", &records)?;
            self.write_text_raw("sweep.tsv", &sweep_curve.to_tsv())?;
            self.mark(RunStage::Segmentation)?;
        }

        let request_log = request_log.into_inner().unwrap();
        Ok(RunArtifacts {
            run_dir: self.run_dir.clone(),
            episode_id: self.episode.episode_id.clone(),
            task_label: self.episode.task_label.clone(),
            condition,
            config_digest: self.manifest.config_digest.clone(),
            sampled_indices,
            image_captions,
            scene_captions,
            summary,
            final_caption,
            embeddings,
            similarity,
            segmentation,
            sweep_results,
            sweep: sweep_curve,
            request_log,
        })
    }

    fn expect_len(&self, file: &str, actual: usize, expected: usize) -> Result<(), PipelineError> {
        if actual != expected {
            return Err(PipelineError::CorruptCheckpoint {
                path: self.path(file),
                reason: format!("{actual} records, expected {expected}"),
            });
        }
        Ok(())
    }

    fn write_text(&self, name: &str, text: &str) -> Result<(), PipelineError> {
        self.write_text_raw(name, &format!("{text}\n"))
    }

    fn write_text_raw(&self, name: &str, text: &str) -> Result<(), PipelineError> {
        let path = self.path(name);
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
    }

    fn read_text(&self, name: &str) -> Result<String, PipelineError> {
        let path = self.path(name);
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::CorruptCheckpoint {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Ok(text.strip_suffix('\n').unwrap_or(&text).to_string())
    }

    fn write_jsonl<T: Serialize>(&self, name: &str, records: &[T]) -> Result<(), PipelineError> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        self.write_text_raw(name, &out)
    }

    fn read_jsonl<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, PipelineError> {
        read_jsonl(&self.path(name))
    }

    fn read_embeddings(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, PipelineError> {
        let path = self.path("embeddings.tsv");
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::CorruptCheckpoint {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let vectors = parse_embeddings_tsv(&text).map_err(|reason| PipelineError::CorruptCheckpoint {
            path: path.clone(),
            reason,
        })?;
        if vectors.len() != texts.len() {
            return Err(PipelineError::CorruptCheckpoint {
                path,
                reason: format!("{} vectors for {} captions", vectors.len(), texts.len()),
            });
        }
        vectors
            .into_iter()
            .zip(texts)
            .map(|(v, t)| EmbeddingVector::new(v, crate::embedding::text_digest(t)).map_err(Into::into))
            .collect()
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Header `position\tdim`, then one row per caption: position and values.
/// Values use shortest round-trip formatting, so parsing restores them
/// exactly.
pub fn embeddings_tsv(vectors: &[EmbeddingVector]) -> String {
    let dim = vectors.first().map_or(0, EmbeddingVector::dim);
    let mut out = format!("position\tdim={dim}\n");
    for (i, v) in vectors.iter().enumerate() {
        let _ = write!(out, "{i}");
        for x in &v.values {
            let _ = write!(out, "\t{x}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings_tsv(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let mut fields = line.split('\t');
        let pos: usize = fields
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| format!("line {}: bad position", n + 1))?;
        if pos != rows.len() {
            return Err(format!("line {}: position {pos} out of order", n + 1));
        }
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(values);
    }
    Ok(rows)
}

pub fn similarity_tsv(series: &SimilaritySeries) -> String {
    let mut out = String::from("j\tsimilarity\n");
    for (j, s) in series.values.iter().enumerate() {
        let _ = writeln!(out, "{j}\t{s}");
    }
    out
}

pub fn parse_similarity_tsv(text: &str) -> Result<SimilaritySeries, String> {
    let values = text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split('\t')
                .nth(1)
                .ok_or_else(|| format!("bad row `{l}`"))?
                .parse::<f64>()
                .map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimilaritySeries::from_values(values))
}

/// Captions that were embedded for a completed run, in order.
pub fn load_segment_captions(run_dir: &Path) -> Result<Vec<String>, PipelineError> {
    let manifest = RunManifest::load(run_dir)?;
    match manifest.config.segment_on {
        SegmentSource::ImageCaptions => Ok(read_jsonl::<ImageCaptionRecord>(
            &run_dir.join("image_captions.jsonl"),
        )?
        .into_iter()
        .map(|r| r.caption)
        .collect()),
        SegmentSource::SceneCaptions => Ok(read_jsonl::<SceneCaptionRecord>(
            &run_dir.join("scene_captions.jsonl"),
        )?
        .into_iter()
        .map(|r| r.caption)
        .collect()),
    }
}

pub fn load_similarity(run_dir: &Path) -> Result<SimilaritySeries, PipelineError> {
    let path = run_dir.join("similarity.tsv");
    let text = fs::read_to_string(&path).map_err(|e| PipelineError::CorruptCheckpoint {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    parse_similarity_tsv(&text).map_err(|reason| PipelineError::CorruptCheckpoint { path, reason })
}

/// Every run directory (containing a manifest) below `root`, sorted.
pub fn find_runs(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        if dir.join(MANIFEST).is_file() {
            out.push(dir.to_path_buf());
            return;
        }
        if let Ok(entries) = fs::read_dir(dir) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    walk(&p, out);
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(root, &mut out);
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..50).collect();
        let out = parallel_map(&items, 7, |i, x| i * 100 + x);
        assert_eq!(out, (0..50).map(|i| i * 101).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<usize>::new(), 4, |_, x| *x).is_empty());
    }

    #[test]
    fn embeddings_tsv_roundtrips_exactly() {
        let v = vec![
            EmbeddingVector::new(vec![0.1, -1.0 / 3.0, 1e-300], String::new()).unwrap(),
            EmbeddingVector::new(vec![std::f64::consts::PI, 2.0, -0.0], String::new()).unwrap(),
        ];
        let parsed = parse_embeddings_tsv(&embeddings_tsv(&v)).unwrap();
        assert_eq!(parsed[0], v[0].values);
        assert_eq!(parsed[1][0].to_bits(), std::f64::consts::PI.to_bits());
    }

    #[test]
    fn config_digest_tracks_output_settings_only() {
        let base = RunConfig::default();
        let d = base.digest().unwrap();
        assert_eq!(d, RunConfig::default().digest().unwrap());
        let other_concurrency = RunConfig {
            concurrency: 16,
            ..base.clone()
        };
        assert_eq!(d, other_concurrency.digest().unwrap());
        assert_ne!(d, base.with_condition(AblationCondition::NoState).digest().unwrap());
        assert_ne!(d, RunConfig { k: 4, ..base.clone() }.digest().unwrap());
        assert_ne!(
            d,
            RunConfig {
                few_shot: "example".into(),
                ..base
            }
            .digest()
            .unwrap()
        );
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        for bad in [
            RunConfig { stride: 0, ..RunConfig::default() },
            RunConfig { offset: 20, ..RunConfig::default() },
            RunConfig { k: 0, ..RunConfig::default() },
            RunConfig { threshold: 2.0, ..RunConfig::default() },
            RunConfig { thresholds: vec![0.5, 0.4], ..RunConfig::default() },
            RunConfig { concurrency: 0, ..RunConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(PipelineError::InvalidConfig(_))));
        }
    }

    #[test]
    fn config_from_toml_uses_defaults() {
        let c = RunConfig::from_toml("k = 4\ncondition = \"joint\"\n").unwrap();
        assert_eq!(c.k, 4);
        assert_eq!(c.condition, AblationCondition::JointOnly);
        assert_eq!(c.stride, 20);
        assert_eq!(c.thresholds.len(), 21);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn thresholds_accept_list_or_grid() {
        let grid = RunConfig::from_toml("thresholds = \"0.5:0.7:0.1\"").unwrap();
        assert_eq!(grid.thresholds, vec![0.5, 0.6, 0.7]);
        let list = RunConfig::from_toml("thresholds = [0.2, 0.4]").unwrap();
        assert_eq!(list.thresholds, vec![0.2, 0.4]);
        assert!(RunConfig::from_toml("thresholds = \"0:1\"").is_err());
    }

    #[test]
    fn sanitized_ids() {
        assert_eq!(sanitize_id("door/ep 01"), "door_ep_01");
    }
}
