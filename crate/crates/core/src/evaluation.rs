//! Rubric scoring of final captions and the report tables built from it.
//!
//! A rubric lists terms for three categories: the manipulated object, the
//! action, and trajectory content (motion direction, target location).
//! Presence is automated. Correctness comes only from a human adjudication
//! overlay and is never true where the term is absent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::prompt::AblationCondition;
use crate::segmentation::{format_threshold, SweepCurve};

const BUILTIN_RUBRICS: &str = include_str!("../templates/rubrics.toml");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("caption `{0}` is empty")]
    EmptyCaption(String),
    #[error("rubric `{task}`: {reason}")]
    InvalidRubric { task: String, reason: String },
    #[error("no rubric for task `{0}`")]
    UnknownTask(String),
    #[error("no scores for condition `{0}`")]
    EmptyBucket(AblationCondition),
    #[error("curves for {task}/{condition} use different threshold grids")]
    GridMismatch {
        task: String,
        condition: AblationCondition,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EvalError {
    pub fn class(&self) -> &'static str {
        match self {
            EvalError::Io { .. } => "io",
            EvalError::InvalidRubric { .. } | EvalError::UnknownTask(_) => "config",
            _ => "data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Object,
    Action,
    Trajectory,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Object, Category::Action, Category::Trajectory];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Object => "object",
            Category::Action => "action",
            Category::Trajectory => "trajectory",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryFlags {
    pub object: bool,
    pub action: bool,
    pub trajectory: bool,
}

impl CategoryFlags {
    pub fn get(&self, c: Category) -> bool {
        match c {
            Category::Object => self.object,
            Category::Action => self.action,
            Category::Trajectory => self.trajectory,
        }
    }

    pub fn set(&mut self, c: Category, value: bool) {
        match c {
            Category::Object => self.object = value,
            Category::Action => self.action = value,
            Category::Trajectory => self.trajectory = value,
        }
    }

    fn and(self, other: CategoryFlags) -> CategoryFlags {
        CategoryFlags {
            object: self.object && other.object,
            action: self.action && other.action,
            trajectory: self.trajectory && other.trajectory,
        }
    }
}

/// One term or a list of synonyms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TermGroup {
    Single(String),
    Synonyms(Vec<String>),
}

impl TermGroup {
    pub fn terms(&self) -> &[String] {
        match self {
            TermGroup::Single(t) => std::slice::from_ref(t),
            TermGroup::Synonyms(ts) => ts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RubricSpec {
    task_label: String,
    object: Vec<TermGroup>,
    action: Vec<TermGroup>,
    trajectory: Vec<TermGroup>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RubricFile {
    rubric: Vec<RubricSpec>,
}

/// Terms are stored normalized, as token lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Rubric {
    pub task_label: String,
    terms: [Vec<Vec<String>>; 3],
}

/// Lowercases and splits on anything that is not a letter or digit.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

impl Rubric {
    /// Each argument is a list of term groups for one category.
    pub fn new(
        task_label: &str,
        object: &[TermGroup],
        action: &[TermGroup],
        trajectory: &[TermGroup],
    ) -> Result<Self, EvalError> {
        let invalid = |reason: String| EvalError::InvalidRubric {
            task: task_label.to_string(),
            reason,
        };
        if task_label.trim().is_empty() {
            return Err(invalid("task_label is empty".into()));
        }
        let mut terms: [Vec<Vec<String>>; 3] = Default::default();
        for (slot, (category, groups)) in terms.iter_mut().zip(
            Category::ALL
                .iter()
                .zip([object, action, trajectory]),
        ) {
            for group in groups {
                for term in group.terms() {
                    let tokens = normalize_tokens(term);
                    if tokens.is_empty() {
                        return Err(invalid(format!(
                            "{} term `{term}` has no letters or digits",
                            category.as_str()
                        )));
                    }
                    if !slot.contains(&tokens) {
                        slot.push(tokens);
                    }
                }
            }
            if slot.is_empty() {
                return Err(invalid(format!("no {} terms", category.as_str())));
            }
        }
        Ok(Self {
            task_label: task_label.to_string(),
            terms,
        })
    }

    pub fn terms(&self, c: Category) -> &[Vec<String>] {
        &self.terms[c as usize]
    }

    /// Adds a synonym to a category.
    pub fn with_term(mut self, c: Category, term: &str) -> Self {
        let tokens = normalize_tokens(term);
        if !tokens.is_empty() && !self.terms[c as usize].contains(&tokens) {
            self.terms[c as usize].push(tokens);
        }
        self
    }
}

/// Rubrics keyed by task label.
#[derive(Debug, Clone, PartialEq)]
pub struct RubricSet {
    pub rubrics: BTreeMap<String, Rubric>,
}

impl RubricSet {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_RUBRICS).expect("built-in rubrics parse")
    }

    /// TOML with one `[[rubric]]` table per task.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let file: RubricFile = toml::from_str(text).map_err(|e| EvalError::InvalidRubric {
            task: "?".into(),
            reason: e.to_string(),
        })?;
        let mut rubrics = BTreeMap::new();
        for spec in file.rubric {
            let rubric = Rubric::new(&spec.task_label, &spec.object, &spec.action, &spec.trajectory)?;
            if rubrics.insert(spec.task_label.clone(), rubric).is_some() {
                return Err(EvalError::InvalidRubric {
                    task: spec.task_label,
                    reason: "defined twice".into(),
                });
            }
        }
        Ok(Self { rubrics })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, task: &str) -> Result<&Rubric, EvalError> {
        self.rubrics
            .get(task)
            .ok_or_else(|| EvalError::UnknownTask(task.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionScore {
    pub caption_id: String,
    pub presence: CategoryFlags,
    /// Set only when the caption was adjudicated.
    pub correctness: Option<CategoryFlags>,
    pub word_count: usize,
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    tokens.windows(phrase.len()).any(|w| w == phrase)
}

pub fn score_caption(caption_id: &str, caption: &str, rubric: &Rubric) -> Result<CaptionScore, EvalError> {
    if caption.trim().is_empty() {
        return Err(EvalError::EmptyCaption(caption_id.to_string()));
    }
    let tokens = normalize_tokens(caption);
    let mut presence = CategoryFlags::default();
    for c in Category::ALL {
        presence.set(c, rubric.terms(c).iter().any(|t| contains_phrase(&tokens, t)));
    }
    Ok(CaptionScore {
        caption_id: caption_id.to_string(),
        presence,
        correctness: None,
        word_count: word_count(caption),
    })
}

/// Human judgments: caption id → per-category correctness.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Adjudication(pub BTreeMap<String, CategoryFlags>);

impl Adjudication {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let bytes = std::fs::read(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| EvalError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Sets correctness on adjudicated scores. A judgment of "correct" for
    /// an absent category is recorded as incorrect; returns how many such
    /// flags were dropped.
    pub fn apply(&self, scores: &mut [CaptionScore]) -> usize {
        let mut dropped = 0;
        for score in scores {
            if let Some(judged) = self.0.get(&score.caption_id) {
                let kept = judged.and(score.presence);
                dropped += Category::ALL
                    .iter()
                    .filter(|&&c| judged.get(c) && !kept.get(c))
                    .count();
                score.correctness = Some(kept);
            }
        }
        if dropped > 0 {
            log::warn!("{dropped} correctness flags set where the rubric term is absent; treated as incorrect");
        }
        dropped
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryRates {
    pub object: f64,
    pub action: f64,
    pub trajectory: f64,
}

impl CategoryRates {
    pub fn get(&self, c: Category) -> f64 {
        match c {
            Category::Object => self.object,
            Category::Action => self.action,
            Category::Trajectory => self.trajectory,
        }
    }

    fn from_flags<'a>(flags: impl Iterator<Item = &'a CategoryFlags> + Clone) -> Option<Self> {
        let n = flags.clone().count();
        if n == 0 {
            return None;
        }
        let rate = |c: Category| flags.clone().filter(|f| f.get(c)).count() as f64 / n as f64;
        Some(Self {
            object: rate(Category::Object),
            action: rate(Category::Action),
            trajectory: rate(Category::Trajectory),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub captions: usize,
    pub presence: CategoryRates,
    /// Over adjudicated captions only; absent when none were.
    pub correctness: Option<CategoryRates>,
    pub adjudicated: usize,
    pub mean_word_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task_label: String,
    pub conditions: BTreeMap<AblationCondition, ConditionSummary>,
}

pub fn aggregate(
    task_label: &str,
    scores: &BTreeMap<AblationCondition, Vec<CaptionScore>>,
) -> Result<AblationReport, EvalError> {
    let mut conditions = BTreeMap::new();
    for (&condition, bucket) in scores {
        if bucket.is_empty() {
            return Err(EvalError::EmptyBucket(condition));
        }
        let presence = CategoryRates::from_flags(bucket.iter().map(|s| &s.presence))
            .expect("bucket is non-empty");
        let judged: Vec<&CategoryFlags> = bucket.iter().filter_map(|s| s.correctness.as_ref()).collect();
        let correctness = CategoryRates::from_flags(judged.iter().copied());
        let total_words: usize = bucket.iter().map(|s| s.word_count).sum();
        conditions.insert(
            condition,
            ConditionSummary {
                captions: bucket.len(),
                presence,
                correctness,
                adjudicated: judged.len(),
                mean_word_count: total_words as f64 / bucket.len() as f64,
            },
        );
    }
    Ok(AblationReport {
        task_label: task_label.to_string(),
        conditions,
    })
}

/// Sweep curves of one episode, keyed for export.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeCurve {
    pub task_label: String,
    pub condition: AblationCondition,
    pub episode_id: String,
    pub curve: SweepCurve,
}

fn rate_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

/// Table with rows category × {presence, correctness} and one column per
/// condition.
pub fn success_table(report: &AblationReport) -> String {
    let mut out = String::from("category\tmeasure");
    for c in AblationCondition::ALL {
        let _ = write!(out, "\t{c}");
    }
    out.push('\n');
    for cat in Category::ALL {
        for measure in ["presence", "correctness"] {
            let _ = write!(out, "{}\t{measure}", cat.as_str());
            for c in AblationCondition::ALL {
                let v = report.conditions.get(&c).and_then(|s| match measure {
                    "presence" => Some(s.presence.get(cat)),
                    _ => s.correctness.map(|r| r.get(cat)),
                });
                let _ = write!(out, "\t{}", rate_cell(v));
            }
            out.push('\n');
        }
    }
    out
}

/// Threshold, one count column per episode (sorted by id), then the mean.
pub fn curve_table(curves: &[&EpisodeCurve]) -> Result<String, EvalError> {
    let mut sorted = curves.to_vec();
    sorted.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    let Some(first) = sorted.first() else {
        return Ok(String::new());
    };
    if sorted.iter().any(|c| c.curve.thresholds != first.curve.thresholds) {
        return Err(EvalError::GridMismatch {
            task: first.task_label.clone(),
            condition: first.condition,
        });
    }
    let mut out = String::from("threshold");
    for c in &sorted {
        let _ = write!(out, "\t{}", c.episode_id);
    }
    out.push_str("\tmean\n");
    for (i, t) in first.curve.thresholds.iter().enumerate() {
        let _ = write!(out, "{}", format_threshold(*t));
        let mut sum = 0usize;
        for c in &sorted {
            let _ = write!(out, "\t{}", c.curve.counts[i]);
            sum += c.curve.counts[i];
        }
        let _ = writeln!(out, "\t{:.4}", sum as f64 / sorted.len() as f64);
    }
    Ok(out)
}

pub fn word_count_table(reports: &BTreeMap<String, AblationReport>) -> String {
    let mut out = String::from("task\tcondition\tcaptions\tmean_word_count\n");
    for (task, report) in reports {
        for (c, s) in &report.conditions {
            let _ = writeln!(out, "{task}\t{c}\t{}\t{:.2}", s.captions, s.mean_word_count);
        }
    }
    out
}

/// Writes `success_<task>.tsv` per report, `curve_<task>_<condition>.tsv`
/// per curve group and `word_counts.tsv`. Returns the written paths, sorted.
pub fn export_reports(
    out_dir: &Path,
    reports: &BTreeMap<String, AblationReport>,
    curves: &[EpisodeCurve],
) -> Result<Vec<PathBuf>, EvalError> {
    let mut files: BTreeMap<PathBuf, String> = BTreeMap::new();
    for (task, report) in reports {
        files.insert(
            out_dir.join(format!("success_{}.tsv", crate::pipeline::sanitize_id(task))),
            success_table(report),
        );
    }
    let mut groups: BTreeMap<(String, AblationCondition), Vec<&EpisodeCurve>> = BTreeMap::new();
    for c in curves {
        groups
            .entry((c.task_label.clone(), c.condition))
            .or_default()
            .push(c);
    }
    for ((task, condition), group) in &groups {
        files.insert(
            out_dir.join(format!(
                "curve_{}_{condition}.tsv",
                crate::pipeline::sanitize_id(task)
            )),
            curve_table(group)?,
        );
    }
    if !reports.is_empty() {
        files.insert(out_dir.join("word_counts.tsv"), word_count_table(reports));
    }
    for (path, text) in &files {
        write_atomic(path, text.as_bytes()).map_err(|source| EvalError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(files.into_keys().collect())
}

/// Scores and curves gathered from completed run directories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub scores: BTreeMap<String, BTreeMap<AblationCondition, Vec<CaptionScore>>>,
    pub reports: BTreeMap<String, AblationReport>,
    pub curves: Vec<EpisodeCurve>,
    /// Runs skipped because they were incomplete.
    pub skipped: Vec<PathBuf>,
}

/// Scores the final caption of every complete run. Caption ids are
/// `<episode>/<condition>`. Runs without a task label fall under
/// `default_task` when given.
pub fn evaluate_runs(
    runs: &[PathBuf],
    rubrics: &RubricSet,
    adjudication: Option<&Adjudication>,
    default_task: Option<&str>,
) -> Result<Evaluation, EvalError> {
    let mut eval = Evaluation::default();
    for run_dir in runs {
        let manifest = match crate::pipeline::RunManifest::load(run_dir) {
            Ok(m) if m.is_complete() => m,
            _ => {
                log::warn!("skipping incomplete run {}", run_dir.display());
                eval.skipped.push(run_dir.clone());
                continue;
            }
        };
        let task = manifest
            .task_label
            .clone()
            .or_else(|| default_task.map(str::to_string))
            .ok_or_else(|| EvalError::Malformed {
                path: run_dir.clone(),
                reason: "run has no task label".into(),
            })?;
        let rubric = rubrics.get(&task)?;
        let read = |name: &str| {
            let path = run_dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| EvalError::Io { path, source })
        };
        let condition = manifest.config.condition;
        let caption_id = format!("{}/{condition}", manifest.episode_id);
        let score = score_caption(&caption_id, read("final_caption.txt")?.trim_end(), rubric)?;
        eval.scores
            .entry(task.clone())
            .or_default()
            .entry(condition)
            .or_default()
            .push(score);
        let curve = SweepCurve::from_tsv(&read("sweep.tsv")?).map_err(|reason| EvalError::Malformed {
            path: run_dir.join("sweep.tsv"),
            reason,
        })?;
        eval.curves.push(EpisodeCurve {
            task_label: task,
            condition,
            episode_id: manifest.episode_id,
            curve,
        });
    }
    for buckets in eval.scores.values_mut() {
        for bucket in buckets.values_mut() {
            bucket.sort_by(|a, b| a.caption_id.cmp(&b.caption_id));
            if let Some(adj) = adjudication {
                adj.apply(bucket);
            }
        }
    }
    for (task, buckets) in &eval.scores {
        eval.reports.insert(task.clone(), aggregate(task, buckets)?);
    }
    Ok(eval)
}
