//! Deterministic synthetic episodes in the on-disk episode format.
//!
//! The arm follows a scripted reach / grasp / lift / carry / lower / release
//! cycle. Frames are drawn as flat-colored rectangles so every image is
//! distinct yet cheap to produce. Used by tests and for trying the CLI
//! without recorded data.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, Rgb, RgbImage};

use crate::episode::{write_manifest, EpisodeMeta, Frame, EE_POSE_DIM, JOINT_DIM};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub episode_id: String,
    pub task_label: Option<String>,
    pub frames: usize,
    pub image_size: u32,
}

impl SyntheticSpec {
    pub fn new(episode_id: impl Into<String>, frames: usize) -> Self {
        Self {
            episode_id: episode_id.into(),
            task_label: Some("door_opening".into()),
            frames,
            image_size: 256,
        }
    }

    pub fn task(mut self, label: impl Into<String>) -> Self {
        self.task_label = Some(label.into());
        self
    }
}

/// Gripper opening per the recorded convention: -1 open, 1 closed.
fn gripper_at(phase: f64) -> f64 {
    if (0.25..0.75).contains(&phase) {
        1.0
    } else {
        -1.0
    }
}

/// State at normalized time `t` in [0, 1].
pub fn state_at(t: f64) -> ([f64; JOINT_DIM], [f64; EE_POSE_DIM]) {
    let x = 0.45 + 0.15 * (2.0 * PI * t).sin();
    let y = -0.10 + 0.25 * t;
    let z = 0.90 + 0.12 * (PI * t).sin() - 0.08 * (4.0 * PI * t).cos().max(0.0);
    let roll = PI;
    let pitch = 0.1 * (2.0 * PI * t).cos();
    let yaw = -0.5 + 0.8 * t;
    let mut joints = [0.0; JOINT_DIM];
    for (i, j) in joints.iter_mut().take(7).enumerate() {
        let k = i as f64 + 1.0;
        *j = 0.3 * k.sqrt() * (2.0 * PI * t * (1.0 + 0.2 * k) + 0.4 * k).sin();
    }
    joints[7] = gripper_at(t);
    (joints, [x, y, z, roll, pitch, yaw])
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, color: Rgb<u8>) {
    let (iw, ih) = (img.width() as i64, img.height() as i64);
    let (xa, xb) = (x0.max(0), (x0 + w).min(iw));
    if xa >= xb {
        return;
    }
    let buf: &mut [u8] = img;
    for y in y0.max(0)..(y0 + h).min(ih) {
        let row = (y * iw) as usize * 3;
        for px in buf[row + xa as usize * 3..row + xb as usize * 3].chunks_exact_mut(3) {
            px.copy_from_slice(&color.0);
        }
    }
}

pub fn render_frame(size: u32, t: f64, ee: &[f64; EE_POSE_DIM], gripper: f64) -> RgbImage {
    let s = size as i64;
    let mut img = RgbImage::from_pixel(size, size, Rgb([196, 200, 206]));
    // Table.
    fill_rect(&mut img, 0, s * 3 / 4, s, s / 4, Rgb([120, 92, 60]));
    // Object: follows the hand while grasped.
    let hand_x = ((ee[0] - 0.2) / 0.5 * s as f64) as i64;
    let hand_y = ((1.2 - ee[2]) / 0.5 * s as f64) as i64;
    let obj = s / 10;
    let (ox, oy) = if gripper > 0.0 {
        (hand_x - obj / 2, hand_y + obj / 2)
    } else if t < 0.5 {
        (s / 3, s * 3 / 4 - obj)
    } else {
        (s * 2 / 3, s * 3 / 4 - obj)
    };
    fill_rect(&mut img, ox, oy, obj, obj, Rgb([210, 160, 40]));
    // Arm link and hand.
    fill_rect(&mut img, hand_x - 2, 0, 4, hand_y.max(0), Rgb([60, 60, 70]));
    let hand = s / 12;
    let color = if gripper > 0.0 {
        Rgb([200, 40, 40])
    } else {
        Rgb([40, 90, 200])
    };
    fill_rect(&mut img, hand_x - hand / 2, hand_y - hand / 2, hand, hand, color);
    // Progress bar keeps consecutive frames distinct.
    let progress = (t * s as f64) as i64;
    fill_rect(&mut img, 0, 0, progress, 3, Rgb([20, 20, 20]));
    img
}

/// Writes the episode under `dir` and returns the directory.
pub fn write_episode(dir: &Path, spec: &SyntheticSpec) -> std::io::Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let denom = spec.frames.saturating_sub(1).max(1) as f64;
    let mut frames = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let t = i as f64 / denom;
        let (joint_state, ee_pose) = state_at(t);
        let path = images.join(format!("{i:06}.png"));
        let img = render_frame(spec.image_size, t, &ee_pose, joint_state[7]);
        let file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        PngEncoder::new_with_quality(file, CompressionType::Fast, FilterType::Adaptive)
            .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
            .map_err(std::io::Error::other)?;
        frames.push(Frame {
            index: i as u64,
            image_ref: path,
            joint_state,
            ee_pose,
        });
    }
    let meta = EpisodeMeta {
        episode_id: spec.episode_id.clone(),
        task_label: spec.task_label.clone(),
        image_width: spec.image_size,
        image_height: spec.image_size,
    };
    write_manifest(dir, &meta, &frames)?;
    Ok(dir.to_path_buf())
}
