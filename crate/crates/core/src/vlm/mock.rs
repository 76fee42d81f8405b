use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{BackendError, BackendKind, BackendReply, CacheKey, ChatBackend, ChatRequest};
use crate::prompt::PromptPart;

/// Timestamp stamped on every mock reply so recorded sessions are byte-stable.
pub const MOCK_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

/// Deterministic in-process backend.
///
/// Answers from a digest → text script first, then (if enabled) from
/// [`synthetic_reply`]. Failure injection covers retry and checkpoint tests.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    script: HashMap<String, String>,
    fallback: bool,
    transient_failures: AtomicU32,
    fail_always: Option<BackendError>,
    fail_tag_prefix: Option<String>,
    calls: AtomicUsize,
    seen_tags: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    /// Script only; unscripted requests fail.
    pub fn new() -> Self {
        Self::default()
    }

    /// Unscripted requests get a synthetic caption.
    pub fn with_fallback() -> Self {
        Self {
            fallback: true,
            ..Self::default()
        }
    }

    pub fn script(mut self, digest: impl Into<String>, text: impl Into<String>) -> Self {
        self.script.insert(digest.into(), text.into());
        self
    }

    /// The next `n` calls fail with a transient error.
    pub fn fail_transient_times(self, n: u32) -> Self {
        self.transient_failures.store(n, Ordering::SeqCst);
        self
    }

    pub fn fail_with(mut self, error: BackendError) -> Self {
        self.fail_always = Some(error);
        self
    }

    /// Requests whose tag starts with `prefix` fail with a non-transient error.
    pub fn fail_tags_starting_with(mut self, prefix: impl Into<String>) -> Self {
        self.fail_tag_prefix = Some(prefix.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Request tags in call order.
    pub fn seen_tags(&self) -> Vec<String> {
        self.seen_tags.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn send(&self, request: &ChatRequest, key: &CacheKey) -> Result<BackendReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.seen_tags
            .lock()
            .unwrap()
            .push(request.request_tag.clone());
        if let Some(err) = &self.fail_always {
            return Err(err.clone());
        }
        if self
            .transient_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(BackendError::Transient("injected transient failure".into()));
        }
        if let Some(prefix) = &self.fail_tag_prefix {
            if request.request_tag.starts_with(prefix.as_str()) {
                return Err(BackendError::Fatal(format!(
                    "injected failure for `{}`",
                    request.request_tag
                )));
            }
        }
        let text = match self.script.get(key.digest()) {
            Some(text) => text.clone(),
            None if self.fallback => synthetic_reply(request),
            None => {
                return Err(BackendError::Fatal(format!(
                    "no scripted response for `{}` ({})",
                    request.request_tag,
                    key.digest()
                )))
            }
        };
        Ok(BackendReply {
            text,
            timestamp: MOCK_TIMESTAMP.to_string(),
        })
    }
}

const ACTIONS: [&str; 6] = [
    "reaches toward the target object",
    "grasps the object with its gripper",
    "lifts the object upward",
    "carries the object sideways",
    "lowers the object downward",
    "releases the object and retracts",
];

/// A caption-shaped reply that is a pure function of the request.
///
/// Image captions pick an action from a hash of the attached image, and
/// mention gripper and hand state when the prompt carries it. Later stages
/// stitch together the captions quoted in their prompt.
pub fn synthetic_reply(request: &ChatRequest) -> String {
    let stage = request.request_tag.split('/').next().unwrap_or_default();
    let last_user = request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == super::Role::User);
    let text: String = last_user
        .map(|m| {
            m.parts
                .iter()
                .filter_map(|p| match p {
                    PromptPart::Text(t) => Some(t.as_str()),
                    PromptPart::Image(_) => None,
                })
                .collect::<Vec<_>>()
                .join("\n")
        })
        .unwrap_or_default();

    match stage {
        "image_caption" => {
            let mut h = Sha256::new();
            for part in last_user.iter().flat_map(|m| &m.parts) {
                if let PromptPart::Image(img) = part {
                    h.update(&img.bytes);
                }
            }
            let digest = h.finalize();
            let action = ACTIONS[digest[0] as usize % ACTIONS.len()];
            let mut caption = format!("The robot arm {action}");
            if let Some(joints) = labelled_list(&text, "Joint angles:") {
                if let Some(g) = joints.last() {
                    let state = if *g > 0.0 { "closed" } else { "open" };
                    caption.push_str(&format!(" with the gripper {state}"));
                }
            }
            if let Some(pose) = labelled_list(&text, "End-effector pose:") {
                if pose.len() >= 3 {
                    caption.push_str(&format!(
                        " while the hand is at height {:.2} m",
                        pose[2]
                    ));
                }
            }
            caption.push('.');
            caption
        }
        "scene_caption" => {
            let captions = quoted(&text, "Caption: ");
            match (captions.first(), captions.last()) {
                (Some(first), Some(last)) if captions.len() > 1 => format!(
                    "{} Then {}",
                    first,
                    lower_first(last)
                ),
                (Some(first), _) => first.clone(),
                _ => "The robot arm continues its task.".to_string(),
            }
        }
        "summary" => {
            let scenes = quoted_scenes(&text);
            if scenes.is_empty() {
                "The robot arm performs a manipulation task.".to_string()
            } else {
                format!(
                    "The robot arm performs a manipulation task in {} stages. {}",
                    scenes.len(),
                    scenes.join(" ")
                )
            }
        }
        "instruction" => {
            let mut out =
                "Move the robot arm to grasp the target object and complete the task".to_string();
            if text.contains("incorporating joint angle") {
                out.push_str(
                    ", moving the hand downward to grasp and then upward while following the recorded joint angles",
                );
            }
            out.push('.');
            out
        }
        _ => "The robot arm is doing its task.".to_string(),
    }
}

fn labelled_list(text: &str, label: &str) -> Option<Vec<f64>> {
    let line = text.lines().find(|l| l.starts_with(label))?;
    let inner = line[label.len()..].trim().trim_start_matches('[').trim_end_matches(']');
    inner
        .split(',')
        .map(|v| v.trim().parse::<f64>().ok())
        .collect()
}

fn quoted(text: &str, prefix: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| l.strip_prefix(prefix))
        .map(str::to_string)
        .collect()
}

fn quoted_scenes(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| l.starts_with("Scene "))
        .filter_map(|l| l.split_once(": ").map(|(_, c)| c.to_string()))
        .collect()
}

fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::{ChatMessage, Role};

    fn req(tag: &str, text: &str) -> ChatRequest {
        ChatRequest {
            model_id: "m".into(),
            temperature: 0.0,
            messages: vec![ChatMessage {
                role: Role::User,
                parts: vec![PromptPart::Text(text.into())],
            }],
            request_tag: tag.into(),
        }
    }

    #[test]
    fn synthetic_image_caption_mentions_state() {
        let text = "Image 1 (frame 0)\nJoint angles: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 1.000]\nEnd-effector pose: [0.1, 0.2, 0.912, 0, 0, 0]";
        let out = synthetic_reply(&req("image_caption/ep/0", text));
        assert!(out.starts_with("The robot arm "));
        assert!(out.contains("gripper closed"));
        assert!(out.contains("height 0.91 m"));
        assert_eq!(out, synthetic_reply(&req("image_caption/ep/0", text)));
    }

    #[test]
    fn synthetic_scene_joins_captions() {
        let text = "Caption: The robot arm lifts.\nCaption: The robot arm drops.";
        assert_eq!(
            synthetic_reply(&req("scene_caption/ep/0", text)),
            "The robot arm lifts. Then the robot arm drops."
        );
    }

    #[test]
    fn unscripted_request_fails_without_fallback() {
        let b = ScriptedBackend::new();
        let r = req("x", "y");
        assert!(matches!(
            b.send(&r, &r.key()),
            Err(BackendError::Fatal(_))
        ));
    }
}
