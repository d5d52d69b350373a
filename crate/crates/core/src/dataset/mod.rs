//! Dataset directory schema, strict loading and neck in-painting.
//!
//! Layout: `manifest.json`, `frames/NNNN.png` (RGB8), `torso/NNNN.png` (RGB8
//! torso-over-background plate), `masks/NNNN.png` (L8, nonzero = face),
//! `audio/logits.f32` (little-endian f32, `[num_frames, dim]`),
//! `background.png` (RGB8).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::LogitsTrack;
use crate::render::{Camera, Pose};
use crate::Error;

pub mod synthetic;

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_EYE_RATIO: f64 = 0.01;
pub const POSE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        col >= self.x && col < self.x + self.w && row >= self.y && row < self.y + self.h
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }

    /// A `size × size` square centred on this rectangle, shifted (never
    /// padded) to lie inside the image.
    pub fn centered_patch(&self, size: usize, width: usize, height: usize) -> Rect {
        let size_w = size.min(width);
        let size_h = size.min(height);
        let cx = self.x as isize + self.w as isize / 2;
        let cy = self.y as isize + self.h as isize / 2;
        let x = (cx - size_w as isize / 2).clamp(0, (width - size_w) as isize) as usize;
        let y = (cy - size_h as isize / 2).clamp(0, (height - size_h) as isize) as usize;
        Rect { x, y, w: size_w, h: size_h }
    }

    pub fn pixels(&self) -> Vec<(usize, usize)> {
        (self.y..self.y + self.h).flat_map(|r| (self.x..self.x + self.w).map(move |c| (r, c))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: String,
    pub torso: String,
    pub mask: String,
    /// Row-major 4×4 head-to-camera transform.
    pub pose: [f64; 16],
    pub eye_ratio: f64,
    pub lips: Rect,
    pub audio_index: usize,
    #[serde(default)]
    pub split: Split,
    /// Bounding box of both eyes at their widest, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eye_rect: Option<Rect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRecord {
    pub path: String,
    pub num_frames: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub camera: Camera,
    pub logits: LogitsRecord,
    pub background: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// `[H·W, 3]` in `[0, 1]`.
    pub image: Vec<f32>,
    /// Torso-over-background plate, `[H·W, 3]`.
    pub plate: Vec<f32>,
    pub face: Vec<bool>,
    pub pose: Pose,
    pub eye_ratio: f32,
    pub lips: Rect,
    pub eye_rect: Option<Rect>,
    pub audio_index: usize,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub camera: Camera,
    pub frames: Vec<Frame>,
    pub logits: LogitsTrack,
    pub background: Vec<f32>,
}

impl Dataset {
    pub fn frames_in(&self, split: Split) -> Vec<usize> {
        self.frames.iter().enumerate().filter(|(_, f)| f.split == split).map(|(i, _)| i).collect()
    }

    pub fn train_frames(&self) -> Vec<usize> {
        self.frames_in(Split::Train)
    }

    pub fn test_frames(&self) -> Vec<usize> {
        self.frames_in(Split::Test)
    }

    /// Position of frame `i` among training frames; test frames map to the
    /// first training embedding.
    pub fn embedding_index(&self, i: usize) -> usize {
        if self.frames[i].split != Split::Train {
            return 0;
        }
        self.frames[..i].iter().filter(|f| f.split == Split::Train).count()
    }

    pub fn num_pixels(&self) -> usize {
        self.camera.width * self.camera.height
    }
}

/// Reads and validates a dataset directory (or its `manifest.json`).
pub fn load(path: &Path) -> Result<Dataset, Error> {
    let manifest_path = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", manifest_path.display())))?;
    from_manifest(&root, manifest)
}

pub fn from_manifest(root: &Path, manifest: Manifest) -> Result<Dataset, Error> {
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Validation(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.frames.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let cam = manifest.camera;
    if cam.width == 0 || cam.height == 0 || !(cam.fx > 0.0 && cam.fy > 0.0) {
        return Err(Error::Validation(format!("camera intrinsics are invalid: {cam:?}")));
    }
    for (i, f) in manifest.frames.iter().enumerate() {
        validate_record(i, f, &cam, manifest.logits.num_frames)?;
    }
    let logits_path = root.join(&manifest.logits.path);
    let bytes = fs::read(&logits_path).map_err(|e| Error::io(&logits_path, e))?;
    let expected = manifest.logits.num_frames * manifest.logits.dim * 4;
    if bytes.len() != expected {
        return Err(Error::Validation(format!(
            "{}: {} bytes, expected {expected} for {}x{} float32",
            logits_path.display(),
            bytes.len(),
            manifest.logits.num_frames,
            manifest.logits.dim
        )));
    }
    let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let logits = LogitsTrack::new(manifest.logits.num_frames, manifest.logits.dim, values)?;
    let background = read_rgb(&root.join(&manifest.background), cam.width, cam.height)
        .map_err(|e| Error::Validation(format!("background: {e}")))?;

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, f) in manifest.frames.iter().enumerate() {
        let ctx = |field: &str, e: Error| Error::Validation(format!("frame {i} field {field}: {e}"));
        let image = read_rgb(&root.join(&f.image), cam.width, cam.height).map_err(|e| ctx("image", e))?;
        let plate = read_rgb(&root.join(&f.torso), cam.width, cam.height).map_err(|e| ctx("torso", e))?;
        let face = read_mask(&root.join(&f.mask), cam.width, cam.height).map_err(|e| ctx("mask", e))?;
        frames.push(Frame {
            index: i,
            image,
            plate,
            face,
            pose: Pose { matrix: f.pose },
            eye_ratio: f.eye_ratio as f32,
            lips: f.lips,
            eye_rect: f.eye_rect,
            audio_index: f.audio_index,
            split: f.split,
        });
    }
    let ds = Dataset { root: root.to_path_buf(), camera: cam, frames, logits, background };
    if ds.train_frames().is_empty() {
        return Err(Error::Validation("dataset has no training frames".into()));
    }
    Ok(ds)
}

fn validate_record(i: usize, f: &FrameRecord, cam: &Camera, num_logits: usize) -> Result<(), Error> {
    let pose = Pose { matrix: f.pose };
    let err = pose.orthonormality_error();
    let det = pose.determinant();
    if !(err <= POSE_TOLERANCE) || !((det - 1.0).abs() <= POSE_TOLERANCE) {
        return Err(Error::Validation(format!(
            "frame {i} field pose: rotation is not orthonormal (determinant {det:.6}, max |RRᵀ−I| {err:.2e})"
        )));
    }
    if f.pose[12..16] != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::Validation(format!("frame {i} field pose: last row must be [0, 0, 0, 1]")));
    }
    if !f.lips.inside(cam.width, cam.height) {
        return Err(Error::Validation(format!(
            "frame {i} field lips: rectangle {:?} is outside the {}x{} image",
            f.lips, cam.width, cam.height
        )));
    }
    if let Some(r) = f.eye_rect {
        if !r.inside(cam.width, cam.height) {
            return Err(Error::Validation(format!("frame {i} field eye_rect: rectangle {r:?} is outside the image")));
        }
    }
    if !(0.0..=MAX_EYE_RATIO).contains(&f.eye_ratio) {
        return Err(Error::Validation(format!(
            "frame {i} field eye_ratio: {} is outside [0, {MAX_EYE_RATIO}]",
            f.eye_ratio
        )));
    }
    if f.audio_index >= num_logits {
        return Err(Error::Validation(format!(
            "frame {i} field audio_index: {} but the logits track has {num_logits} frames",
            f.audio_index
        )));
    }
    Ok(())
}

pub fn read_rgb(path: &Path, width: usize, height: usize) -> Result<Vec<f32>, Error> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let img = img.to_rgb8();
    if img.width() as usize != width || img.height() as usize != height {
        return Err(Error::Image {
            path: path.into(),
            message: format!("size {}x{} does not match camera {width}x{height}", img.width(), img.height()),
        });
    }
    Ok(img.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
}

pub fn read_mask(path: &Path, width: usize, height: usize) -> Result<Vec<bool>, Error> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let img = img.to_luma8();
    if img.width() as usize != width || img.height() as usize != height {
        return Err(Error::Image { path: path.into(), message: "mask size does not match camera".into() });
    }
    Ok(img.as_raw().iter().map(|&v| v != 0).collect())
}

/// Quantizes `[H·W, 3]` floats to RGB8 and writes a PNG.
pub fn write_rgb(path: &Path, rgb: &[f32], width: usize, height: usize) -> Result<(), Error> {
    let bytes: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Contract(format!("image buffer does not hold {width}x{height} RGB")))?;
    img.save(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

pub fn write_mask(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<(), Error> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Contract("mask buffer has the wrong size".into()))?;
    img.save(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Extends the neck upward: in every column containing neck pixels, the
/// `k`-th pixel above the topmost neck pixel takes that pixel's colour times
/// `γ^k`, for `1 ≤ k ≤ max_rows` (unbounded when `None`). Columns without
/// neck pixels are untouched. Returns the new image and the filled pixels.
pub fn neck_inpaint(
    rgb: &[f32],
    neck: &[bool],
    width: usize,
    height: usize,
    gamma: f64,
    max_rows: Option<usize>,
) -> (Vec<f32>, Vec<bool>) {
    let mut out = rgb.to_vec();
    let mut filled = vec![false; width * height];
    for col in 0..width {
        let Some(top) = (0..height).find(|&r| neck[r * width + col]) else { continue };
        let src = [0, 1, 2].map(|k| rgb[(top * width + col) * 3 + k] as f64);
        let limit = max_rows.unwrap_or(top).min(top);
        for k in 1..=limit {
            let r = top - k;
            let scale = gamma.powi(k as i32);
            for c in 0..3 {
                out[(r * width + col) * 3 + c] = (src[c] * scale) as f32;
            }
            filled[r * width + col] = true;
        }
    }
    (out, filled)
}
