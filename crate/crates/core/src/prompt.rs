//! Prompt rendering for the three captioning stages.
//!
//! Rendering is a pure function of its inputs: the same frames, captions,
//! condition and [`PromptConfig`] always produce byte-identical text. That is
//! what makes response caching and fixture replay work.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::episode::{Frame, SampledSequence};
use crate::imaging::{EncodedImage, ImageError, ImageStore};

/// Frames per scene chunk.
pub const DEFAULT_CHUNK_SIZE: usize = 5;
pub const DEFAULT_PRECISION: usize = 3;

const BUILTIN_TEMPLATES: &str = include_str!("../templates/prompts-v1.toml");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("chunk size must be at least 1")]
    ZeroChunkSize,
    #[error("cannot chunk an empty sequence")]
    EmptySequence,
    #[error("scene chunk {chunk} has no image captions")]
    MissingImageCaptions { chunk: usize },
    #[error("scene chunk {chunk} has {captions} captions for {frames} frames")]
    CaptionCountMismatch {
        chunk: usize,
        captions: usize,
        frames: usize,
    },
    #[error("{captions} scene captions supplied for {chunks} chunks")]
    SceneCountMismatch { captions: usize, chunks: usize },
    #[error("at least one scene caption is required")]
    NoSceneCaptions,
    #[error("summary is empty")]
    EmptySummary,
    #[error("template `{template}` references unknown placeholder `{name}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template `{template}` has an unterminated placeholder")]
    UnterminatedPlaceholder { template: String },
    #[error("cannot load templates: {0}")]
    Templates(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Which proprioceptive state is serialized into prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationCondition {
    #[serde(rename = "none")]
    NoState,
    #[serde(rename = "joint")]
    JointOnly,
    #[serde(rename = "ee")]
    EeOnly,
    Both,
}

impl AblationCondition {
    pub const ALL: [AblationCondition; 4] = [
        AblationCondition::NoState,
        AblationCondition::JointOnly,
        AblationCondition::EeOnly,
        AblationCondition::Both,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationCondition::NoState => "none",
            AblationCondition::JointOnly => "joint",
            AblationCondition::EeOnly => "ee",
            AblationCondition::Both => "both",
        }
    }

    pub fn includes_joints(self) -> bool {
        matches!(self, AblationCondition::JointOnly | AblationCondition::Both)
    }

    pub fn includes_ee(self) -> bool {
        matches!(self, AblationCondition::EeOnly | AblationCondition::Both)
    }

    pub fn has_state(self) -> bool {
        self != AblationCondition::NoState
    }
}

impl fmt::Display for AblationCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "nostate" => Ok(AblationCondition::NoState),
            "joint" | "jointonly" => Ok(AblationCondition::JointOnly),
            "ee" | "eeonly" => Ok(AblationCondition::EeOnly),
            "both" => Ok(AblationCondition::Both),
            other => Err(format!(
                "unknown condition `{other}` (expected none, joint, ee or both)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ImageCaption,
    SceneCaption,
    Summary,
    Instruction,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ImageCaption => "image_caption",
            Stage::SceneCaption => "scene_caption",
            Stage::Summary => "summary",
            Stage::Instruction => "instruction",
        }
    }
}

/// A group of consecutive sampled frames captioned together.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneChunk {
    pub chunk_index: usize,
    pub frames: Vec<Frame>,
    pub image_captions: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptPart {
    Text(String),
    Image(Arc<EncodedImage>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub stage: Stage,
    pub condition: AblationCondition,
    pub parts: Vec<PromptPart>,
}

impl RenderedPrompt {
    pub fn text_parts(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            PromptPart::Text(t) => Some(t.as_str()),
            PromptPart::Image(_) => None,
        })
    }

    pub fn image_parts(&self) -> impl Iterator<Item = &Arc<EncodedImage>> {
        self.parts.iter().filter_map(|p| match p {
            PromptPart::Image(img) => Some(img),
            PromptPart::Text(_) => None,
        })
    }

    pub fn image_count(&self) -> usize {
        self.image_parts().count()
    }

    /// All text parts joined by blank lines.
    pub fn text(&self) -> String {
        self.text_parts().collect::<Vec<_>>().join("\n\n")
    }
}

/// The template set. Each field is a text block with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    pub version: String,
    pub preamble: String,
    pub image_caption: String,
    pub process1: String,
    pub process2: String,
    pub process3: String,
    pub process3_state_clause: String,
    pub series: String,
    pub frame: String,
    pub frame_caption: String,
    pub joint_state: String,
    pub ee_pose: String,
    pub scene: String,
    pub summary: String,
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATES).expect("built-in templates parse")
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        toml::from_str(text).map_err(|e| PromptError::Templates(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Templates(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Content digest; changes whenever any template text changes.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("templates serialize");
        hex::encode(Sha256::digest(&canonical))
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone)]
pub struct PromptConfig {
    /// Decimal places for state values.
    pub precision: usize,
    /// In-context example inserted after the preamble; omitted when empty.
    pub few_shot: String,
    pub templates: Arc<PromptTemplates>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            precision: DEFAULT_PRECISION,
            few_shot: String::new(),
            templates: Arc::new(PromptTemplates::builtin()),
        }
    }
}

/// Substitutes `{{name}}` placeholders. Every placeholder must be supplied.
pub fn fill(template_name: &str, template: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let lookup: BTreeMap<&str, &str> = vars.iter().copied().collect();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| PromptError::UnterminatedPlaceholder {
                template: template_name.to_string(),
            })?;
        let name = after[..end].trim();
        let value = lookup
            .get(name)
            .ok_or_else(|| PromptError::UnknownPlaceholder {
                template: template_name.to_string(),
                name: name.to_string(),
            })?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Partitions the sampled frames into consecutive groups of `k`. The last
/// chunk keeps the remainder.
pub fn chunk(sampled: &SampledSequence, k: usize) -> Result<Vec<SceneChunk>, PromptError> {
    if k == 0 {
        return Err(PromptError::ZeroChunkSize);
    }
    if sampled.frames.is_empty() {
        return Err(PromptError::EmptySequence);
    }
    Ok(sampled
        .frames
        .chunks(k)
        .enumerate()
        .map(|(chunk_index, frames)| SceneChunk {
            chunk_index,
            frames: frames.to_vec(),
            image_captions: None,
        })
        .collect())
}

/// Attaches image captions (aligned with the sampled frames) to chunks.
pub fn attach_captions(chunks: &mut [SceneChunk], image_captions: &[String]) {
    let mut start = 0;
    for c in chunks {
        let end = (start + c.frames.len()).min(image_captions.len());
        c.image_captions = Some(image_captions[start..end].to_vec());
        start = end;
    }
}

/// Fixed-precision, locale-independent bracketed list: `[1.1, 0.5, -1.0]`.
pub fn format_values(values: &[f64], precision: usize) -> String {
    let items: Vec<String> = values
        .iter()
        .map(|v| {
            let s = format!("{v:.precision$}");
            // "-0.000" and "0.000" must render the same.
            if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
                s[1..].to_string()
            } else {
                s
            }
        })
        .collect();
    format!("[{}]", items.join(", "))
}

/// The bare state lists for `condition`, one per line; empty for `NoState`.
pub fn render_state_text(frame: &Frame, condition: AblationCondition, precision: usize) -> String {
    let mut lists = Vec::new();
    if condition.includes_joints() {
        lists.push(format_values(&frame.joint_state, precision));
    }
    if condition.includes_ee() {
        lists.push(format_values(&frame.ee_pose, precision));
    }
    lists.join("\n")
}

fn state_lines(
    frame: &Frame,
    condition: AblationCondition,
    config: &PromptConfig,
) -> Result<Vec<String>, PromptError> {
    let t = &config.templates;
    let mut lines = Vec::new();
    if condition.includes_joints() {
        let values = format_values(&frame.joint_state, config.precision);
        lines.push(fill("joint_state", &t.joint_state, &[("values", &values)])?);
    }
    if condition.includes_ee() {
        let values = format_values(&frame.ee_pose, config.precision);
        lines.push(fill("ee_pose", &t.ee_pose, &[("values", &values)])?);
    }
    Ok(lines)
}

fn frame_block(
    position: usize,
    frame: &Frame,
    caption: Option<&str>,
    condition: AblationCondition,
    config: &PromptConfig,
) -> Result<String, PromptError> {
    let t = &config.templates;
    let mut lines = vec![fill(
        "frame",
        &t.frame,
        &[
            ("position", &position.to_string()),
            ("frame_index", &frame.index.to_string()),
        ],
    )?];
    if let Some(caption) = caption {
        lines.push(fill("frame_caption", &t.frame_caption, &[("caption", caption)])?);
    }
    lines.extend(state_lines(frame, condition, config)?);
    Ok(lines.join("\n"))
}

fn header_parts(config: &PromptConfig) -> Vec<PromptPart> {
    let mut parts = vec![PromptPart::Text(config.templates.preamble.clone())];
    if !config.few_shot.trim().is_empty() {
        parts.push(PromptPart::Text(config.few_shot.trim_end().to_string()));
    }
    parts
}

pub fn build_image_caption_prompt(
    frame: &Frame,
    condition: AblationCondition,
    config: &PromptConfig,
    images: &ImageStore,
) -> Result<RenderedPrompt, PromptError> {
    let mut parts = header_parts(config);
    parts.push(PromptPart::Text(fill(
        "image_caption",
        &config.templates.image_caption,
        &[],
    )?));
    parts.push(PromptPart::Text(frame_block(1, frame, None, condition, config)?));
    parts.push(PromptPart::Image(images.get(&frame.image_ref)?));
    Ok(RenderedPrompt {
        stage: Stage::ImageCaption,
        condition,
        parts,
    })
}

pub fn build_scene_caption_prompt(
    chunk: &SceneChunk,
    condition: AblationCondition,
    config: &PromptConfig,
    images: &ImageStore,
) -> Result<RenderedPrompt, PromptError> {
    let captions = chunk
        .image_captions
        .as_ref()
        .ok_or(PromptError::MissingImageCaptions {
            chunk: chunk.chunk_index,
        })?;
    if captions.len() != chunk.frames.len() {
        return Err(PromptError::CaptionCountMismatch {
            chunk: chunk.chunk_index,
            captions: captions.len(),
            frames: chunk.frames.len(),
        });
    }
    let t = &config.templates;
    let mut parts = header_parts(config);
    parts.push(PromptPart::Text(fill("process1", &t.process1, &[])?));
    parts.push(PromptPart::Text(fill(
        "series",
        &t.series,
        &[("count", &chunk.frames.len().to_string())],
    )?));
    for (i, (frame, caption)) in chunk.frames.iter().zip(captions).enumerate() {
        parts.push(PromptPart::Text(frame_block(
            i + 1,
            frame,
            Some(caption),
            condition,
            config,
        )?));
        parts.push(PromptPart::Image(images.get(&frame.image_ref)?));
    }
    Ok(RenderedPrompt {
        stage: Stage::SceneCaption,
        condition,
        parts,
    })
}

/// Process-2 prompt. The frames and state behind each scene caption are
/// attached again alongside it.
pub fn build_summary_prompt(
    scene_captions: &[String],
    chunks: &[SceneChunk],
    condition: AblationCondition,
    config: &PromptConfig,
    images: &ImageStore,
) -> Result<RenderedPrompt, PromptError> {
    if scene_captions.is_empty() {
        return Err(PromptError::NoSceneCaptions);
    }
    if scene_captions.len() != chunks.len() {
        return Err(PromptError::SceneCountMismatch {
            captions: scene_captions.len(),
            chunks: chunks.len(),
        });
    }
    let t = &config.templates;
    let mut parts = header_parts(config);
    parts.push(PromptPart::Text(fill("process2", &t.process2, &[])?));
    for (m, (caption, chunk)) in scene_captions.iter().zip(chunks).enumerate() {
        parts.push(PromptPart::Text(fill(
            "scene",
            &t.scene,
            &[("number", &(m + 1).to_string()), ("caption", caption)],
        )?));
        for (i, frame) in chunk.frames.iter().enumerate() {
            parts.push(PromptPart::Text(frame_block(i + 1, frame, None, condition, config)?));
            parts.push(PromptPart::Image(images.get(&frame.image_ref)?));
        }
    }
    Ok(RenderedPrompt {
        stage: Stage::Summary,
        condition,
        parts,
    })
}

/// Process-3 prompt. Sent as a follow-up turn in the summary conversation.
pub fn build_instruction_prompt(
    summary: &str,
    condition: AblationCondition,
    config: &PromptConfig,
) -> Result<RenderedPrompt, PromptError> {
    if summary.trim().is_empty() {
        return Err(PromptError::EmptySummary);
    }
    let t = &config.templates;
    let clause = if condition.has_state() {
        t.process3_state_clause.as_str()
    } else {
        ""
    };
    let parts = vec![
        PromptPart::Text(fill("process3", &t.process3, &[("state_clause", clause)])?),
        PromptPart::Text(fill("summary", &t.summary, &[("summary", summary.trim())])?),
    ];
    Ok(RenderedPrompt {
        stage: Stage::Instruction,
        condition,
        parts,
    })
}
