//! Command-line interface.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage or config error,
//! 3 data error, 4 backend error. Failures print one line to stderr:
//! `error: class=<class> msg=<message>`, with `kind=<cause>` after the
//! class for episode validation failures.
//!
//! Secrets come only from the environment:
//!
//! | variable                 | used by                          |
//! |--------------------------|----------------------------------|
//! | `ROBOCAP_API_KEY`        | live chat backend                |
//! | `ROBOCAP_VLM_BASE_URL`   | live chat backend base URL       |
//! | `ROBOCAP_EMBED_API_KEY`  | live embedding backend           |
//! | `ROBOCAP_EMBED_BASE_URL` | live embedding backend base URL  |

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::embedding::{
    EmbedError, Embedder, EmbeddingBackend, EmbeddingFixture, HashEmbedder, LiveEmbedder,
    ReplayEmbedder,
};
use crate::episode::{load_episode, sample_frames, IngestError};
use crate::evaluation::{evaluate_runs, export_reports, Adjudication, EvalError, RubricSet};
use crate::fsutil::{write_atomic, write_json};
use crate::imaging::ImageStore;
use crate::pipeline::{
    find_runs, load_segment_captions, load_similarity, run_ablation, run_episode, Backends,
    BoundaryRecord, PipelineError, RunArtifacts, RunConfig, RunManifest, SegmentSource,
};
use crate::prompt::AblationCondition;
use crate::segmentation::{
    annotate_boundaries, format_threshold, merge_short_segments, segment, sweep, ThresholdGrid,
};
use crate::vlm::{
    BackendKind, ChatBackend, FixtureArchive, InFlightLimiter, LiveBackend, LiveConfig,
    ReplayBackend, ResponseCache, ScriptedBackend, VlmClient,
};

const ENV_API_KEY: &str = "ROBOCAP_API_KEY";
const ENV_VLM_BASE_URL: &str = "ROBOCAP_VLM_BASE_URL";
const ENV_EMBED_API_KEY: &str = "ROBOCAP_EMBED_API_KEY";
const ENV_EMBED_BASE_URL: &str = "ROBOCAP_EMBED_BASE_URL";
const DEFAULT_EMBED_BASE_URL: &str = "http://127.0.0.1:8080/v1";

#[derive(Debug, Parser)]
#[command(
    name = "robocap",
    version,
    about = "Caption robot-manipulation episodes with a vision-language model and segment them into subtasks"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Output root; runs, caches and reports live below it.
    #[arg(long, global = true, default_value = "robocap-out")]
    pub run_dir: PathBuf,
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Chat backend.
    #[arg(long, global = true, default_value = "mock")]
    pub backend: BackendKind,
    /// Embedding backend.
    #[arg(long, global = true, default_value = "mock")]
    pub embed_backend: BackendKind,
    /// Chat fixture for the replay backend, or the output of `record`.
    #[arg(long, global = true)]
    pub fixture: Option<PathBuf>,
    /// Embedding fixture; defaults to `<fixture stem>.embeddings.json`.
    #[arg(long, global = true)]
    pub embed_fixture: Option<PathBuf>,
    /// Maximum concurrent backend calls.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Skip the on-disk response cache.
    #[arg(long, global = true)]
    pub no_cache: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Keep frames whose index is congruent to the offset modulo the stride.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub offset: Option<usize>,
    /// Frames per scene caption.
    #[arg(long)]
    pub k: Option<usize>,
    /// State serialized into prompts.
    #[arg(long, value_parser = ["none", "joint", "ee", "both"])]
    pub condition: Option<String>,
    /// Segmentation threshold.
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// Sweep grid as start:end:step.
    #[arg(long)]
    pub thresholds: Option<ThresholdGrid>,
    /// Decimal places for state values.
    #[arg(long)]
    pub precision: Option<usize>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Longest image edge sent to the model, in pixels.
    #[arg(long)]
    pub max_image_edge: Option<u32>,
    /// Text file with worked examples inserted after the preamble.
    #[arg(long)]
    pub few_shot: Option<PathBuf>,
    /// Prompt template file.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Segment on scene captions instead of image captions (experimental).
    #[arg(long)]
    pub segment_scenes: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check episode directories and report their frame counts.
    Validate {
        #[arg(required = true)]
        episodes: Vec<PathBuf>,
        #[arg(long, default_value_t = crate::episode::DEFAULT_STRIDE)]
        stride: usize,
    },
    /// Caption one episode under one condition.
    Caption {
        episode: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Caption episodes under all four conditions.
    Ablate {
        #[arg(required = true)]
        episodes: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Segment a finished run at one threshold.
    Segment {
        run: PathBuf,
        #[arg(long, allow_negative_numbers = true, default_value_t = crate::segmentation::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Merge away segments shorter than this many captions.
        #[arg(long)]
        min_segment_len: Option<usize>,
    },
    /// Boundary counts of a finished run over a threshold grid.
    Sweep {
        run: PathBuf,
        #[arg(long, default_value = "0:1:0.05")]
        thresholds: ThresholdGrid,
    },
    /// Score final captions of all runs below the output root.
    Evaluate {
        /// Rubric TOML; built-in rubrics otherwise.
        #[arg(long)]
        rubric: Option<PathBuf>,
        /// Human correctness judgments (JSON).
        #[arg(long)]
        adjudication: Option<PathBuf>,
        /// Task for runs whose episode has no task label.
        #[arg(long)]
        task: Option<String>,
    },
    /// Caption episodes and save every exchange as a replay fixture.
    Record {
        #[arg(required = true)]
        episodes: Vec<PathBuf>,
        /// Record all four conditions.
        #[arg(long)]
        all_conditions: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Caption an episode from a recorded fixture.
    Replay {
        episode: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write success tables, threshold curves and segmentation reports.
    Report {
        #[arg(long)]
        rubric: Option<PathBuf>,
        #[arg(long)]
        adjudication: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
    },
    /// Write a synthetic episode for trying the pipeline.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 580)]
        frames: usize,
        #[arg(long, default_value = "synthetic")]
        episode_id: String,
        #[arg(long, default_value = "door_opening")]
        task: String,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub class: &'static str,
    /// Finer-grained cause, e.g. the ingestion error variant.
    pub kind: Option<&'static str>,
    pub message: String,
}

impl CliError {
    fn new(class: &'static str, message: impl fmt::Display) -> Self {
        Self {
            class,
            kind: None,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class {
            "usage" | "config" => 2,
            "data" => 3,
            "backend" => 4,
            _ => 1,
        }
    }

    /// `error: class=<class> [kind=<kind>] msg=<message>` on one line.
    pub fn line(&self) -> String {
        let msg = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        match self.kind {
            Some(kind) => format!("error: class={} kind={kind} msg={msg}", self.class),
            None => format!("error: class={} msg={msg}", self.class),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Ingest(inner) => inner.into(),
            e => Self::new(e.class(), e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::new(e.class(), e)
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        let kind = e.kind();
        Self {
            kind: Some(kind),
            ..Self::new(if kind == "io" { "io" } else { "data" }, e)
        }
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        let class = match e {
            EmbedError::Fixture { .. } => "data",
            _ => "backend",
        };
        Self::new(class, e)
    }
}

fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("{e}");
                return 2;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            let err = CliError::new("usage", first.trim_start_matches("error: "));
            eprintln!("{}", err.line());
            return err.exit_code();
        }
    };
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("ROBOCAP_LOG")
        .format_timestamp(None)
        .try_init();
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Validate { episodes, stride } => validate(episodes, *stride),
        Command::Caption { episode, run } => {
            let config = resolve_config(g, run)?;
            let backends = build_backends(g, &config)?;
            write_invocation(g)?;
            let episode = load_episode(episode)?;
            let out = run_episode(&episode, &config, &backends, &g.run_dir)?;
            print_run(&out);
            print_stats(&backends);
            Ok(())
        }
        Command::Replay { episode, run } => {
            if g.backend != BackendKind::Replay {
                return Err(CliError::new("usage", "replay requires --backend replay"));
            }
            let config = resolve_config(g, run)?;
            let backends = build_backends(g, &config)?;
            write_invocation(g)?;
            let episode = load_episode(episode)?;
            let out = run_episode(&episode, &config, &backends, &g.run_dir)?;
            print_run(&out);
            print_stats(&backends);
            Ok(())
        }
        Command::Ablate { episodes, run } => {
            let config = resolve_config(g, run)?;
            let backends = build_backends(g, &config)?;
            write_invocation(g)?;
            let mut failures = Vec::new();
            for path in episodes {
                let episode = load_episode(path)?;
                for (condition, result) in run_ablation(&episode, &config, &backends, &g.run_dir) {
                    match result {
                        Ok(out) => print_run(&out),
                        Err(e) => {
                            println!("failed\t{}\t{condition}\t{e}", episode.episode_id);
                            failures.push(CliError::from(e));
                        }
                    }
                }
            }
            print_stats(&backends);
            match failures.into_iter().next() {
                None => Ok(()),
                Some(first) => Err(first),
            }
        }
        Command::Record {
            episodes,
            all_conditions,
            run,
        } => record(g, episodes, *all_conditions, run),
        Command::Segment {
            run,
            threshold,
            min_segment_len,
        } => segment_command(run, *threshold, *min_segment_len),
        Command::Sweep { run, thresholds } => sweep_command(run, thresholds),
        Command::Evaluate {
            rubric,
            adjudication,
            task,
        } => evaluate_command(g, rubric.as_deref(), adjudication.as_deref(), task.as_deref(), false),
        Command::Report {
            rubric,
            adjudication,
            task,
        } => evaluate_command(g, rubric.as_deref(), adjudication.as_deref(), task.as_deref(), true),
        Command::Synth {
            out,
            frames,
            episode_id,
            task,
        } => {
            let spec = crate::synthetic::SyntheticSpec::new(episode_id.clone(), *frames).task(task.clone());
            crate::synthetic::write_episode(out, &spec).map_err(|e| io_error(out, e))?;
            println!("ok\t{episode_id}\tframes={frames}\t{}", out.display());
            Ok(())
        }
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(g: &GlobalArgs, run: &RunArgs) -> Result<RunConfig, CliError> {
    let mut config = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = run.stride {
        config.stride = v;
    }
    if let Some(v) = run.offset {
        config.offset = v;
    }
    if let Some(v) = run.k {
        config.k = v;
    }
    if let Some(v) = &run.condition {
        config.condition = v.parse().map_err(|e| CliError::new("usage", e))?;
    }
    if let Some(v) = run.threshold {
        config.threshold = v;
    }
    if let Some(v) = &run.thresholds {
        config.thresholds = v.values();
    }
    if let Some(v) = run.precision {
        config.precision = v;
    }
    if let Some(v) = &run.model {
        config.model_id = v.clone();
    }
    if let Some(v) = &run.embed_model {
        config.embed_model = v.clone();
    }
    if let Some(v) = run.embed_dim {
        config.embed_dim = v;
    }
    if let Some(v) = run.max_image_edge {
        config.max_image_edge = v;
    }
    if let Some(path) = &run.few_shot {
        config.few_shot = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    }
    if let Some(v) = &run.templates {
        config.templates = Some(v.clone());
    }
    if run.segment_scenes {
        config.segment_on = SegmentSource::SceneCaptions;
    }
    if let Some(v) = g.concurrency {
        config.concurrency = v;
    }
    config.validate()?;
    Ok(config)
}

fn embed_fixture_path(g: &GlobalArgs) -> Option<PathBuf> {
    g.embed_fixture.clone().or_else(|| {
        g.fixture.as_ref().map(|f| {
            let stem = f.file_stem().unwrap_or_default().to_string_lossy();
            f.with_file_name(format!("{stem}.embeddings.json"))
        })
    })
}

pub fn build_backends(g: &GlobalArgs, config: &RunConfig) -> Result<Backends, CliError> {
    let limiter = Arc::new(InFlightLimiter::new(config.concurrency));
    let chat: Arc<dyn ChatBackend> = match g.backend {
        BackendKind::Mock => Arc::new(ScriptedBackend::with_fallback()),
        BackendKind::Replay => {
            let path = g
                .fixture
                .as_ref()
                .ok_or_else(|| CliError::new("usage", "--backend replay needs --fixture"))?;
            let archive = FixtureArchive::load(path).map_err(|e| CliError::new("data", e))?;
            Arc::new(ReplayBackend::new(archive))
        }
        BackendKind::Live => {
            let api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
            if api_key.is_none() {
                log::warn!("{ENV_API_KEY} is not set; sending requests without credentials");
            }
            let mut live = LiveConfig {
                api_key,
                ..LiveConfig::default()
            };
            if let Ok(url) = std::env::var(ENV_VLM_BASE_URL) {
                live.base_url = url;
            }
            Arc::new(LiveBackend::new(live).map_err(|e| CliError::new("backend", e))?)
        }
    };
    let mut vlm = VlmClient::new(chat).with_limiter(Arc::clone(&limiter));
    if !g.no_cache {
        let dir = g.run_dir.join("cache").join("vlm");
        vlm = vlm.with_cache(ResponseCache::on_disk(&dir).map_err(|e| io_error(&dir, e))?);
    }
    let embed_backend: Arc<dyn EmbeddingBackend> = match g.embed_backend {
        BackendKind::Mock => Arc::new(HashEmbedder::new(config.embed_dim, 0)),
        BackendKind::Replay => {
            let path = embed_fixture_path(g).ok_or_else(|| {
                CliError::new("usage", "--embed-backend replay needs --embed-fixture or --fixture")
            })?;
            Arc::new(ReplayEmbedder::new(EmbeddingFixture::load(&path)?))
        }
        BackendKind::Live => {
            let url = std::env::var(ENV_EMBED_BASE_URL).unwrap_or_else(|_| DEFAULT_EMBED_BASE_URL.to_string());
            let key = std::env::var(ENV_EMBED_API_KEY).ok().filter(|k| !k.is_empty());
            Arc::new(LiveEmbedder::new(&url, &config.embed_model, key)?)
        }
    };
    let embedder = Embedder::new(embed_backend, config.embed_dim).with_limiter(limiter);
    Ok(Backends {
        vlm: Arc::new(vlm),
        embedder: Arc::new(embedder),
        images: Arc::new(ImageStore::new(config.max_image_edge)),
    })
}

#[derive(Serialize)]
struct Invocation {
    argv: Vec<String>,
    backend: BackendKind,
    embed_backend: BackendKind,
    env: BTreeMap<&'static str, String>,
}

/// Records the command line next to the runs. Secret values are replaced.
fn write_invocation(g: &GlobalArgs) -> Result<(), CliError> {
    let mut env = BTreeMap::new();
    for key in [ENV_API_KEY, ENV_EMBED_API_KEY] {
        if std::env::var_os(key).is_some() {
            env.insert(key, "<redacted>".to_string());
        }
    }
    for key in [ENV_VLM_BASE_URL, ENV_EMBED_BASE_URL] {
        if let Ok(v) = std::env::var(key) {
            env.insert(key, v);
        }
    }
    let invocation = Invocation {
        argv: std::env::args().collect(),
        backend: g.backend,
        embed_backend: g.embed_backend,
        env,
    };
    let path = g.run_dir.join("last_invocation.json");
    write_json(&path, &invocation).map_err(|e| io_error(&path, e))
}

fn print_run(out: &RunArtifacts) {
    println!(
        "ok\t{}\t{}\timage_captions={}\tscene_captions={}\tboundaries={}\t{}",
        out.episode_id,
        out.condition,
        out.image_captions.len(),
        out.scene_captions.len(),
        out.segmentation.boundary_indices.len(),
        out.run_dir.display()
    );
}

fn print_stats(backends: &Backends) {
    let s = backends.vlm.stats();
    log::info!(
        "chat requests={} cache_hits={} wire_calls={}",
        s.requests,
        s.cache_hits,
        s.wire_calls
    );
}

fn validate(episodes: &[PathBuf], stride: usize) -> Result<(), CliError> {
    for path in episodes {
        let episode = load_episode(path)?;
        let sampled = sample_frames(&episode, stride, 0).map_err(|e| CliError::new("data", e))?;
        println!(
            "ok\t{}\tframes={}\tsampled={}\tstride={stride}",
            episode.episode_id,
            episode.len(),
            sampled.len()
        );
    }
    Ok(())
}

fn record(g: &GlobalArgs, episodes: &[PathBuf], all_conditions: bool, run: &RunArgs) -> Result<(), CliError> {
    if g.backend == BackendKind::Replay {
        return Err(CliError::new("usage", "record needs a live or mock backend"));
    }
    let config = resolve_config(g, run)?;
    let backends = build_backends(g, &config)?;
    write_invocation(g)?;
    let conditions = if all_conditions {
        AblationCondition::ALL.to_vec()
    } else {
        vec![config.condition]
    };
    let mut archive = FixtureArchive::new();
    let mut embeddings = EmbeddingFixture::new(backends.embedder.model(), config.embed_dim);
    for path in episodes {
        let episode = load_episode(path)?;
        for &condition in &conditions {
            let out = run_episode(&episode, &config.with_condition(condition), &backends, &g.run_dir)?;
            archive.merge(&out.request_log);
            let log = EmbeddingFixture::load(&out.run_dir.join("embedding_log.json"))?;
            embeddings.merge(&log);
            print_run(&out);
        }
    }
    let fixture = g
        .fixture
        .clone()
        .unwrap_or_else(|| g.run_dir.join("fixtures").join("session.json"));
    archive
        .save(&fixture)
        .map_err(|e| CliError::new("io", e))?;
    let embed_path = g
        .embed_fixture
        .clone()
        .unwrap_or_else(|| {
            let stem = fixture.file_stem().unwrap_or_default().to_string_lossy();
            fixture.with_file_name(format!("{stem}.embeddings.json"))
        });
    embeddings.save(&embed_path)?;
    println!("fixture\t{}\texchanges={}", fixture.display(), archive.len());
    println!("embeddings\t{}\ttexts={}", embed_path.display(), embeddings.len());
    print_stats(&backends);
    Ok(())
}

fn analysis_dir(run: &Path) -> Result<PathBuf, CliError> {
    let manifest = RunManifest::load(run)?;
    if !manifest.is_complete() {
        return Err(CliError::new(
            "data",
            format!("run {} is incomplete; resume it first", run.display()),
        ));
    }
    Ok(run.join("analysis"))
}

fn segment_command(run: &Path, threshold: f64, min_len: Option<usize>) -> Result<(), CliError> {
    let out_dir = analysis_dir(run)?;
    let series = load_similarity(run)?;
    let captions = load_segment_captions(run)?;
    let manifest = RunManifest::load(run)?;
    let seg = |e| CliError::new("usage", e);
    let mut result = segment(&series, threshold).map_err(seg)?;
    if let Some(min_len) = min_len {
        result = merge_short_segments(&result, series.caption_count, min_len);
    }
    let report = annotate_boundaries(&result, &series, &captions).map_err(|e| CliError::new("data", e))?;
    let tag = format_threshold(threshold);
    let json_path = out_dir.join(format!("segmentation_{tag}.json"));
    write_json(&json_path, &result).map_err(|e| io_error(&json_path, e))?;
    let mut lines = String::new();
    for row in report.rows {
        let record = BoundaryRecord {
            episode_id: manifest.episode_id.clone(),
            condition: manifest.config.condition,
            threshold,
            boundary_index: row.boundary_index,
            similarity: row.similarity,
            caption_before: row.caption_before,
            caption_after: row.caption_after,
        };
        lines.push_str(&serde_json::to_string(&record).expect("record serializes"));
        lines.push('\n');
    }
    let jsonl = out_dir.join(format!("boundaries_{tag}.jsonl"));
    write_atomic(&jsonl, lines.as_bytes()).map_err(|e| io_error(&jsonl, e))?;
    let indices: Vec<String> = result.boundary_indices.iter().map(usize::to_string).collect();
    println!(
        "threshold={tag}\tboundaries=[{}]\tsegments={}\t{}",
        indices.join(","),
        result.segments.len(),
        json_path.display()
    );
    Ok(())
}

fn sweep_command(run: &Path, grid: &ThresholdGrid) -> Result<(), CliError> {
    let out_dir = analysis_dir(run)?;
    let series = load_similarity(run)?;
    let curve = sweep(&series, &grid.values()).map_err(|e| CliError::new("usage", e))?;
    let path = out_dir.join(format!(
        "sweep_{}_{}_{}.tsv",
        format_threshold(grid.start),
        format_threshold(grid.end),
        format_threshold(grid.step)
    ));
    write_atomic(&path, curve.to_tsv().as_bytes()).map_err(|e| io_error(&path, e))?;
    println!("rows={}\t{}", curve.thresholds.len(), path.display());
    Ok(())
}

fn evaluate_command(
    g: &GlobalArgs,
    rubric: Option<&Path>,
    adjudication: Option<&Path>,
    task: Option<&str>,
    export: bool,
) -> Result<(), CliError> {
    let rubrics = match rubric {
        Some(p) => RubricSet::load(p)?,
        None => RubricSet::builtin(),
    };
    let adjudication = adjudication.map(Adjudication::load).transpose()?;
    let runs = find_runs(&g.run_dir.join("runs"));
    if runs.is_empty() {
        return Err(CliError::new(
            "data",
            format!("no runs below {}", g.run_dir.join("runs").display()),
        ));
    }
    let eval = evaluate_runs(&runs, &rubrics, adjudication.as_ref(), task)?;
    let out_dir = g.run_dir.join("reports");
    let scores_path = out_dir.join("scores.jsonl");
    let mut lines = String::new();
    for buckets in eval.scores.values() {
        for bucket in buckets.values() {
            for s in bucket {
                lines.push_str(&serde_json::to_string(s).expect("score serializes"));
                lines.push('\n');
            }
        }
    }
    write_atomic(&scores_path, lines.as_bytes()).map_err(|e| io_error(&scores_path, e))?;
    let summary_path = out_dir.join("summary.json");
    write_json(&summary_path, &eval.reports).map_err(|e| io_error(&summary_path, e))?;
    for (task, report) in &eval.reports {
        for (c, s) in &report.conditions {
            println!(
                "{task}\t{c}\tcaptions={}\tobject={:.4}\taction={:.4}\ttrajectory={:.4}\tmean_words={:.2}",
                s.captions, s.presence.object, s.presence.action, s.presence.trajectory, s.mean_word_count
            );
        }
    }
    if export {
        let mut written = export_reports(&out_dir, &eval.reports, &eval.curves)?;
        written.extend(segmentation_reports(&out_dir, &runs)?);
        for path in written {
            println!("wrote\t{}", path.display());
        }
    }
    Ok(())
}

/// Per-run table: caption position, similarity to the next caption, whether
/// a boundary follows at the run's threshold, and the caption.
fn segmentation_reports(out_dir: &Path, runs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    for run in runs {
        let manifest = RunManifest::load(run)?;
        if !manifest.is_complete() {
            continue;
        }
        let series = load_similarity(run)?;
        let captions = load_segment_captions(run)?;
        let threshold = manifest.config.threshold;
        let mut text = String::from("position\tsimilarity_to_next\tboundary_after\tcaption\n");
        for (i, caption) in captions.iter().enumerate() {
            let (sim, boundary) = match series.values.get(i) {
                Some(s) => (s.to_string(), (*s < threshold).to_string()),
                None => ("NA".to_string(), "false".to_string()),
            };
            text.push_str(&format!("{i}\t{sim}\t{boundary}\t{}\n", caption.replace(['\t', '\n'], " ")));
        }
        let path = out_dir.join("segments").join(format!(
            "{}_{}_{}.tsv",
            crate::pipeline::sanitize_id(&manifest.episode_id),
            manifest.config.condition,
            &manifest.config_digest[..12]
        ));
        write_atomic(&path, text.as_bytes()).map_err(|e| io_error(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
