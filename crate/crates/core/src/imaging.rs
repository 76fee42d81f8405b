//! Canonical image payloads for chat requests.
//!
//! Every frame image is decoded and re-encoded as 8-bit RGB PNG so that the
//! same file always produces the same bytes, whatever format it was stored in.
//! Cache keys hash these bytes.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::imageops::FilterType as ResizeFilter;
use image::{ImageEncoder, ImageReader};
use thiserror::Error;

pub const PNG_MEDIA_TYPE: &str = "image/png";
pub const DEFAULT_MAX_EDGE: u32 = 512;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read image {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("cannot encode image {path}: {reason}")]
    Encode { path: PathBuf, reason: String },
}

#[derive(Clone, PartialEq, Eq)]
pub struct EncodedImage {
    pub media_type: &'static str,
    pub width: u32,
    pub height: u32,
    pub bytes: Vec<u8>,
}

impl std::fmt::Debug for EncodedImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncodedImage")
            .field("media_type", &self.media_type)
            .field("width", &self.width)
            .field("height", &self.height)
            .field("bytes", &self.bytes.len())
            .finish()
    }
}

impl EncodedImage {
    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.media_type, BASE64.encode(&self.bytes))
    }
}

/// Decodes `path` and re-encodes it as PNG, downscaling so the longer edge is
/// at most `max_edge` pixels.
pub fn encode_image(path: &Path, max_edge: u32) -> Result<EncodedImage, ImageError> {
    let reader = ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| ImageError::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let decoded = reader.decode().map_err(|e| ImageError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;

    let max_edge = max_edge.max(1);
    let decoded = if decoded.width().max(decoded.height()) > max_edge {
        decoded.resize(max_edge, max_edge, ResizeFilter::Triangle)
    } else {
        decoded
    };
    let rgb = decoded.to_rgb8();
    let (width, height) = rgb.dimensions();

    let mut bytes = Vec::new();
    PngEncoder::new_with_quality(
        Cursor::new(&mut bytes),
        CompressionType::Default,
        FilterType::Adaptive,
    )
    .write_image(rgb.as_raw(), width, height, image::ExtendedColorType::Rgb8)
    .map_err(|e| ImageError::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;

    Ok(EncodedImage {
        media_type: PNG_MEDIA_TYPE,
        width,
        height,
        bytes,
    })
}

/// Memoizes encoded payloads by path. Shared across runs of one episode so
/// ablation conditions encode each frame once.
#[derive(Debug)]
pub struct ImageStore {
    max_edge: u32,
    cache: Mutex<HashMap<PathBuf, Arc<EncodedImage>>>,
}

impl ImageStore {
    pub fn new(max_edge: u32) -> Self {
        Self {
            max_edge,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn max_edge(&self) -> u32 {
        self.max_edge
    }

    pub fn get(&self, path: &Path) -> Result<Arc<EncodedImage>, ImageError> {
        if let Some(hit) = self.cache.lock().unwrap().get(path) {
            return Ok(Arc::clone(hit));
        }
        let encoded = Arc::new(encode_image(path, self.max_edge)?);
        self.cache
            .lock()
            .unwrap()
            .insert(path.to_path_buf(), Arc::clone(&encoded));
        Ok(encoded)
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for ImageStore {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_EDGE)
    }
}
