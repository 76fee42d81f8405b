//! Episode loading, validation and stride sampling.
//!
//! An episode lives in its own directory:
//!
//! ```text
//! <episode_dir>/
//!   meta.json        {"episode_id": "...", "task_label": "...", "image_width": 256, "image_height": 256}
//!   episode.jsonl    one frame per line: {"index", "image", "joint_state", "ee_pose"}
//!   images/          frame images referenced (relative to the episode dir) by `image`
//! ```
//!
//! `joint_state` holds seven joint angles in radians followed by the gripper
//! opening. `ee_pose` is `[x, y, z, roll, pitch, yaw]` in meters and radians.
//! Everything is validated eagerly so later stages never see a malformed frame.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of values in a joint-state vector: seven joints plus the gripper.
pub const JOINT_DIM: usize = 8;
/// Number of values in an end-effector pose: position plus roll/pitch/yaw.
pub const EE_POSE_DIM: usize = 6;

pub const MANIFEST_FILE: &str = "episode.jsonl";
pub const META_FILE: &str = "meta.json";

/// Frame sampling stride used when nothing else is configured.
pub const DEFAULT_STRIDE: usize = 20;
pub const DEFAULT_IMAGE_SIZE: u32 = 256;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed meta file {path}: {reason}")]
    MalformedMeta { path: PathBuf, reason: String },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("frame {frame}: field `{field}` has {actual} values, expected {expected}")]
    Arity {
        frame: u64,
        field: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("frame {frame}: field `{field}` contains a non-finite value")]
    NonFinite { frame: u64, field: &'static str },
    #[error("frame {frame}: index is not greater than previous index {previous}")]
    NonMonotonicIndex { frame: u64, previous: u64 },
    #[error("frame {frame}: image {path} cannot be resolved: {reason}")]
    UnresolvableImage {
        frame: u64,
        path: PathBuf,
        reason: String,
    },
    #[error("frame {frame}: image is {actual_w}x{actual_h}, expected {expected_w}x{expected_h}")]
    ImageDimensions {
        frame: u64,
        expected_w: u32,
        expected_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("episode has no frames")]
    EmptyEpisode,
}

impl IngestError {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            IngestError::Io { .. } => "io",
            IngestError::MissingFile(_) => "missing_file",
            IngestError::MalformedMeta { .. } => "malformed_meta",
            IngestError::MalformedRecord { .. } => "malformed_record",
            IngestError::Arity { .. } => "arity",
            IngestError::NonFinite { .. } => "non_finite",
            IngestError::NonMonotonicIndex { .. } => "non_monotonic_index",
            IngestError::UnresolvableImage { .. } => "unresolvable_image",
            IngestError::ImageDimensions { .. } => "image_dimensions",
            IngestError::EmptyEpisode => "empty_episode",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("offset {offset} must be smaller than stride {stride}")]
    OffsetNotBelowStride { offset: usize, stride: usize },
    #[error("cannot sample an empty episode")]
    EmptyEpisode,
    #[error("no frame index is congruent to {offset} modulo {stride}")]
    NoFramesSelected { stride: usize, offset: usize },
}

/// One timestamped observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: u64,
    pub image_ref: PathBuf,
    pub joint_state: [f64; JOINT_DIM],
    pub ee_pose: [f64; EE_POSE_DIM],
}

impl Frame {
    pub fn gripper(&self) -> f64 {
        self.joint_state[JOINT_DIM - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub task_label: Option<String>,
    pub image_width: u32,
    pub image_height: u32,
    /// Directory the episode was loaded from.
    pub source_dir: PathBuf,
    pub frames: Vec<Frame>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Stride-sampled view of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSequence {
    pub source_episode_id: String,
    pub stride: usize,
    pub offset: usize,
    pub frames: Vec<Frame>,
}

impl SampledSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn indices(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.index).collect()
    }
}

/// On-disk `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub episode_id: String,
    #[serde(default)]
    pub task_label: Option<String>,
    #[serde(default = "default_image_size")]
    pub image_width: u32,
    #[serde(default = "default_image_size")]
    pub image_height: u32,
}

fn default_image_size() -> u32 {
    DEFAULT_IMAGE_SIZE
}

/// One line of `episode.jsonl`. Arity is checked after parsing so errors can
/// name the offending frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: u64,
    pub image: String,
    pub joint_state: Vec<f64>,
    pub ee_pose: Vec<f64>,
}

impl From<&Frame> for FrameRecord {
    fn from(frame: &Frame) -> Self {
        Self {
            index: frame.index,
            image: frame.image_ref.to_string_lossy().into_owned(),
            joint_state: frame.joint_state.to_vec(),
            ee_pose: frame.ee_pose.to_vec(),
        }
    }
}

/// Resolves `path` to the episode directory. Accepts the directory itself or
/// either of its two manifest files.
pub fn episode_dir(path: &Path) -> PathBuf {
    match path.file_name().and_then(|n| n.to_str()) {
        Some(MANIFEST_FILE) | Some(META_FILE) if path.is_file() => path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
        _ => path.to_path_buf(),
    }
}

/// Loads and fully validates an episode.
pub fn load_episode(manifest_path: &Path) -> Result<Episode, IngestError> {
    let dir = episode_dir(manifest_path);
    let meta = read_meta(&dir.join(META_FILE))?;

    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(IngestError::MissingFile(manifest));
    }
    let file = fs::File::open(&manifest).map_err(|source| IngestError::Io {
        path: manifest.clone(),
        source,
    })?;

    let mut frames: Vec<Frame> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|source| IngestError::Io {
            path: manifest.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        let frame = validate_record(record, &dir)?;
        if let Some(prev) = frames.last() {
            if frame.index <= prev.index {
                return Err(IngestError::NonMonotonicIndex {
                    frame: frame.index,
                    previous: prev.index,
                });
            }
        }
        check_image(&frame, meta.image_width, meta.image_height)?;
        frames.push(frame);
    }

    if frames.is_empty() {
        return Err(IngestError::EmptyEpisode);
    }

    Ok(Episode {
        episode_id: meta.episode_id,
        task_label: meta.task_label,
        image_width: meta.image_width,
        image_height: meta.image_height,
        source_dir: dir,
        frames,
    })
}

fn read_meta(path: &Path) -> Result<EpisodeMeta, IngestError> {
    if !path.is_file() {
        return Err(IngestError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let meta: EpisodeMeta =
        serde_json::from_str(&text).map_err(|e| IngestError::MalformedMeta {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if meta.episode_id.trim().is_empty() {
        return Err(IngestError::MalformedMeta {
            path: path.to_path_buf(),
            reason: "episode_id is empty".into(),
        });
    }
    if meta.image_width == 0 || meta.image_height == 0 {
        return Err(IngestError::MalformedMeta {
            path: path.to_path_buf(),
            reason: "image dimensions must be positive".into(),
        });
    }
    Ok(meta)
}

fn validate_record(record: FrameRecord, dir: &Path) -> Result<Frame, IngestError> {
    let frame = record.index;
    let joint_state = fixed_array::<JOINT_DIM>(&record.joint_state, frame, "joint_state")?;
    let ee_pose = fixed_array::<EE_POSE_DIM>(&record.ee_pose, frame, "ee_pose")?;
    if record.image.trim().is_empty() {
        return Err(IngestError::UnresolvableImage {
            frame,
            path: PathBuf::new(),
            reason: "empty image reference".into(),
        });
    }
    let image_ref = PathBuf::from(&record.image);
    let image_ref = if image_ref.is_absolute() {
        image_ref
    } else {
        dir.join(image_ref)
    };
    Ok(Frame {
        index: frame,
        image_ref,
        joint_state,
        ee_pose,
    })
}

fn fixed_array<const N: usize>(
    values: &[f64],
    frame: u64,
    field: &'static str,
) -> Result<[f64; N], IngestError> {
    let arr: [f64; N] = values.try_into().map_err(|_| IngestError::Arity {
        frame,
        field,
        expected: N,
        actual: values.len(),
    })?;
    if arr.iter().any(|v| !v.is_finite()) {
        return Err(IngestError::NonFinite { frame, field });
    }
    Ok(arr)
}

fn check_image(frame: &Frame, width: u32, height: u32) -> Result<(), IngestError> {
    let (w, h) = image::image_dimensions(&frame.image_ref).map_err(|e| {
        IngestError::UnresolvableImage {
            frame: frame.index,
            path: frame.image_ref.clone(),
            reason: e.to_string(),
        }
    })?;
    if (w, h) != (width, height) {
        return Err(IngestError::ImageDimensions {
            frame: frame.index,
            expected_w: width,
            expected_h: height,
            actual_w: w,
            actual_h: h,
        });
    }
    Ok(())
}

/// Keeps the frames whose recorded index is congruent to `offset` modulo
/// `stride`, in order. For the usual gap-free episode starting at index 0 this
/// is frames `offset, offset + stride, ...`.
pub fn sample_frames(
    episode: &Episode,
    stride: usize,
    offset: usize,
) -> Result<SampledSequence, SampleError> {
    if stride == 0 {
        return Err(SampleError::ZeroStride);
    }
    if offset >= stride {
        return Err(SampleError::OffsetNotBelowStride { offset, stride });
    }
    if episode.frames.is_empty() {
        return Err(SampleError::EmptyEpisode);
    }
    let (stride_u, offset_u) = (stride as u64, offset as u64);
    let frames: Vec<Frame> = episode
        .frames
        .iter()
        .filter(|f| f.index % stride_u == offset_u)
        .cloned()
        .collect();
    if frames.is_empty() {
        return Err(SampleError::NoFramesSelected { stride, offset });
    }
    Ok(SampledSequence {
        source_episode_id: episode.episode_id.clone(),
        stride,
        offset,
        frames,
    })
}

/// Writes an episode in the on-disk format. Image files must already exist
/// under `dir`; `image_ref`s are stored relative to `dir` when possible.
pub fn write_manifest(dir: &Path, meta: &EpisodeMeta, frames: &[Frame]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let meta_json = serde_json::to_string_pretty(meta).map_err(std::io::Error::other)?;
    fs::write(dir.join(META_FILE), meta_json + "\n")?;
    let mut out = String::new();
    for frame in frames {
        let mut record = FrameRecord::from(frame);
        if let Ok(rel) = frame.image_ref.strip_prefix(dir) {
            record.image = rel.to_string_lossy().replace('\\', "/");
        }
        out.push_str(&serde_json::to_string(&record).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    fs::write(dir.join(MANIFEST_FILE), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(n: usize) -> Episode {
        Episode {
            episode_id: "ep".into(),
            task_label: None,
            image_width: 256,
            image_height: 256,
            source_dir: PathBuf::new(),
            frames: (0..n as u64)
                .map(|i| Frame {
                    index: i,
                    image_ref: PathBuf::from(format!("{i}.png")),
                    joint_state: [0.0; JOINT_DIM],
                    ee_pose: [0.0; EE_POSE_DIM],
                })
                .collect(),
        }
    }

    fn expected_count(n: usize, stride: usize, offset: usize) -> usize {
        (n - 1 - offset) / stride + 1
    }

    #[test]
    fn long_episodes_sample_to_expected_counts() {
        let s = sample_frames(&episode(580), 20, 0).unwrap();
        assert_eq!(s.len(), 29);
        assert_eq!(s.frames.first().unwrap().index, 0);
        assert_eq!(s.frames.last().unwrap().index, 560);

        // 0, 20, ..., 520 enumerated by hand.
        let enumerated: Vec<u64> = (0..539u64).filter(|i| i % 20 == 0).collect();
        assert_eq!(enumerated.len(), 27);
        let s = sample_frames(&episode(539), 20, 0).unwrap();
        assert_eq!(s.indices(), enumerated);
    }

    #[test]
    fn stride_one_is_identity() {
        let ep = episode(5);
        let s = sample_frames(&ep, 1, 0).unwrap();
        assert_eq!(s.frames, ep.frames);
    }

    #[test]
    fn count_law_matches_enumeration() {
        for n in 1..=50usize {
            let ep = episode(n);
            for stride in 1..=10usize {
                for offset in 0..stride.min(n) {
                    let s = sample_frames(&ep, stride, offset).unwrap();
                    let brute: Vec<u64> = (0..n as u64)
                        .filter(|&i| i as usize >= offset && (i as usize - offset) % stride == 0)
                        .collect();
                    assert_eq!(s.indices(), brute, "n={n} stride={stride} offset={offset}");
                    assert_eq!(s.len(), expected_count(n, stride, offset));
                    assert!(s.indices().windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }

    #[test]
    fn sampling_errors() {
        let ep = episode(3);
        assert_eq!(sample_frames(&ep, 0, 0), Err(SampleError::ZeroStride));
        assert_eq!(
            sample_frames(&ep, 2, 2),
            Err(SampleError::OffsetNotBelowStride {
                offset: 2,
                stride: 2
            })
        );
        assert_eq!(
            sample_frames(&episode(0), 2, 0),
            Err(SampleError::EmptyEpisode)
        );
        assert_eq!(
            sample_frames(&ep, 10, 5),
            Err(SampleError::NoFramesSelected {
                stride: 10,
                offset: 5
            })
        );
    }

    #[test]
    fn arity_error_names_frame_and_field() {
        let record = FrameRecord {
            index: 7,
            image: "x.png".into(),
            joint_state: vec![0.0; 7],
            ee_pose: vec![0.0; 6],
        };
        match validate_record(record, Path::new(".")) {
            Err(IngestError::Arity {
                frame: 7,
                field: "joint_state",
                expected: 8,
                actual: 7,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_values_rejected() {
        let record = FrameRecord {
            index: 2,
            image: "x.png".into(),
            joint_state: vec![0.0; 8],
            ee_pose: vec![0.0, 0.0, f64::NAN, 0.0, 0.0, 0.0],
        };
        assert!(matches!(
            validate_record(record, Path::new(".")),
            Err(IngestError::NonFinite {
                frame: 2,
                field: "ee_pose"
            })
        ));
    }

    #[test]
    fn episode_dir_accepts_manifest_paths() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tmp.path().join(MANIFEST_FILE);
        fs::write(&manifest, "").unwrap();
        assert_eq!(episode_dir(&manifest), tmp.path());
        assert_eq!(episode_dir(tmp.path()), tmp.path());
    }
}
