//! Captioning and subtask segmentation for recorded robot-manipulation
//! episodes.
//!
//! Sampled frames and their joint / end-effector state go to a
//! vision-language chat backend in three stages (per-image captions, scene
//! captions over groups of frames, then a summary and a final instruction).
//! The image captions are embedded, and the episode is cut into subtasks
//! wherever consecutive captions drift apart.

pub mod cli;
pub mod embedding;
pub mod episode;
pub mod evaluation;
pub mod fsutil;
pub mod imaging;
pub mod pipeline;
pub mod prompt;
pub mod segmentation;
pub mod synthetic;
pub mod vlm;
