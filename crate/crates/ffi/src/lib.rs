//! C ABI over the portrait-field renderer.
//!
//! Handles are opaque and owned by the caller: every `*_open` must be paired
//! with the matching `*_free`. Handles are immutable once opened and may be
//! shared across threads. Each call returns a [`PfStatus`]; on failure the
//! message is available from [`pf_last_error`] on the same thread until the
//! next failing call.
//!
//! Images are row-major `height × width × 3` floats in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use portrait_field::audio::{momentum_smooth, LogitsTrack};
use portrait_field::dataset::{self, Dataset, Split};
use portrait_field::eval::{self, render_frame, sequence_codes, RenderOptions};
use portrait_field::model::{PortraitModel, FLAG_HEAD, FLAG_LIPS, FLAG_TORSO};
use portrait_field::render::Sampling;
use portrait_field::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    BufferTooSmall = 5,
    Internal = 6,
    Panic = 7,
}

/// A loaded dataset directory.
pub struct PfDataset(Dataset);

/// A loaded checkpoint.
pub struct PfModel(PortraitModel);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PfDatasetInfo {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub audio_frames: usize,
    pub logit_dim: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PfModelInfo {
    pub audio_dim: usize,
    pub code_dim: usize,
    pub logit_dim: usize,
    pub max_samples: usize,
    pub prune: bool,
    pub head_trained: bool,
    pub lips_trained: bool,
    pub torso_trained: bool,
    pub beta: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PfEvalSummary {
    pub frames: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// NaN when undefined.
    pub mouth_correlation: f64,
    /// NaN when the dataset has no eye rectangle.
    pub eye_spearman: f64,
    pub dynamic_ratio: f64,
    pub samples_per_ray: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Status(PfStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn status_of(e: &Error) -> PfStatus {
    match e {
        Error::Validation(_) => PfStatus::InvalidArgument,
        Error::Io { .. } => PfStatus::Io,
        Error::Image { .. } | Error::Checkpoint(_) | Error::Json(_) => PfStatus::Format,
        Error::Tensor(_) | Error::Contract(_) => PfStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PfStatus::Ok,
        Ok(Err(Fail::Status(s, m))) => {
            set_error(m);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {m}"));
            PfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(PfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Fail {
    Fail::Status(PfStatus::InvalidArgument, msg)
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a>(p: *mut f32, len: usize, need: usize) -> Result<&'a mut [f32], Fail> {
    if p.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err(Fail::Status(PfStatus::BufferTooSmall, format!("output buffer holds {len} floats, {need} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(p: *mut T, v: T) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null("output pointer"));
    }
    p.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn pf_status_name(status: PfStatus) -> *const c_char {
    let s: &'static str = match status {
        PfStatus::Ok => "ok\0",
        PfStatus::NullPointer => "null pointer\0",
        PfStatus::InvalidArgument => "invalid argument\0",
        PfStatus::Io => "i/o error\0",
        PfStatus::Format => "malformed file\0",
        PfStatus::BufferTooSmall => "buffer too small\0",
        PfStatus::Internal => "internal error\0",
        PfStatus::Panic => "panic\0",
    };
    s.as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_dataset_open(path: *const c_char, out: *mut *mut PfDataset) -> PfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = dataset::load(&path_arg(path)?)?;
        out.write(Box::into_raw(Box::new(PfDataset(d))));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`pf_dataset_open`] and not be used afterwards. Null is
/// accepted.
#[no_mangle]
pub unsafe extern "C" fn pf_dataset_free(ds: *mut PfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_dataset_info(ds: *const PfDataset, out: *mut PfDatasetInfo) -> PfStatus {
    guard(|| {
        let d = &handle(ds, "dataset")?.0;
        let info = PfDatasetInfo {
            width: d.camera.width,
            height: d.camera.height,
            frames: d.frames.len(),
            train_frames: d.frames_in(Split::Train).len(),
            test_frames: d.frames_in(Split::Test).len(),
            audio_frames: d.logits.num_frames,
            logit_dim: d.logits.logit_dim,
        };
        write_out(out, info)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_open(path: *const c_char, out: *mut *mut PfModel) -> PfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = PortraitModel::load(&path_arg(path)?)?;
        out.write(Box::into_raw(Box::new(PfModel(m))));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`pf_model_open`] and not be used afterwards. Null
/// is accepted.
#[no_mangle]
pub unsafe extern "C" fn pf_model_free(model: *mut PfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_info(model: *const PfModel, out: *mut PfModelInfo) -> PfStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let (max_samples, prune) = match m.config.sampling() {
            Sampling::Pruned { max_samples, .. } => (max_samples, true),
            Sampling::Dense { candidates } => (candidates, false),
        };
        let info = PfModelInfo {
            audio_dim: m.head.config.audio_dim,
            code_dim: m.audio.config.code_dim,
            logit_dim: m.logit_dim,
            max_samples,
            prune,
            head_trained: m.has(FLAG_HEAD),
            lips_trained: m.has(FLAG_LIPS),
            torso_trained: m.has(FLAG_TORSO),
            beta: m.config.beta,
        };
        write_out(out, info)
    })
}

/// Encodes a `frames × logit_dim` row-major logits track into one
/// `code_dim` code per frame with momentum `beta` (negative: the model's
/// configured value), written row-major into `out`.
///
/// # Safety
/// `logits` must hold `frames · logit_dim` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn pf_audio_encode(
    model: *const PfModel,
    logits: *const f32,
    frames: usize,
    logit_dim: usize,
    beta: f64,
    out: *mut f32,
    out_len: usize,
) -> PfStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        if logits.is_null() {
            return Err(null("logits"));
        }
        let need = frames * m.audio.config.code_dim;
        let dst = out_slice(out, out_len, need)?;
        let values = std::slice::from_raw_parts(logits, frames * logit_dim).to_vec();
        let track = LogitsTrack::new(frames, logit_dim, values)?;
        let beta = if beta < 0.0 { m.config.beta } else { beta };
        if !(0.0..1.0).contains(&beta) {
            return Err(invalid(format!("beta {beta} outside [0, 1)")));
        }
        let params = m.eval_params();
        let codes = momentum_smooth(&m.audio_codes(&params, &track)?, beta);
        for (row, c) in dst.chunks_mut(m.audio.config.code_dim).zip(&codes) {
            row.copy_from_slice(c);
        }
        Ok(())
    })
}

/// Renders dataset frame `frame` into `out` (`width · height · 3` floats).
/// `code` is that frame's audio code (`code_dim` floats, see
/// [`pf_audio_encode`]); when null it is computed from the dataset's track.
/// `eye_ratio` overrides the frame's eye value unless it is NaN.
///
/// # Safety
/// Handles must be live; `code` null or `code_dim` floats; `out` `out_len`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn pf_render_frame(
    model: *const PfModel,
    ds: *const PfDataset,
    frame: usize,
    code: *const f32,
    eye_ratio: f32,
    out: *mut f32,
    out_len: usize,
) -> PfStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let d = &handle(ds, "dataset")?.0;
        if frame >= d.frames.len() {
            return Err(invalid(format!("frame {frame} out of range (dataset has {})", d.frames.len())));
        }
        let dst = out_slice(out, out_len, d.num_pixels() * 3)?;
        let params = m.eval_params();
        let code = if code.is_null() {
            sequence_codes(m, &params, d, m.config.beta)?.swap_remove(d.frames[frame].audio_index)
        } else {
            std::slice::from_raw_parts(code, m.audio.config.code_dim).to_vec()
        };
        let mut opts = RenderOptions::for_model(m, d, None);
        if !eye_ratio.is_nan() {
            opts.eye_ratio = Some(eye_ratio);
        }
        let r = render_frame(m, &params, d, frame, &code, &opts)?;
        dst[..r.image.len()].copy_from_slice(&r.image);
        Ok(())
    })
}

/// Scores the model on the dataset's test split.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_evaluate(model: *const PfModel, ds: *const PfDataset, out: *mut PfEvalSummary) -> PfStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let d = &handle(ds, "dataset")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let opts = RenderOptions::for_model(m, d, None);
        let r = eval::evaluate(m, d, Split::Test, &opts)?;
        let s = PfEvalSummary {
            frames: r.frames.len(),
            mean_psnr: r.mean_psnr,
            mean_ssim: r.mean_ssim,
            mouth_correlation: r.mouth_correlation,
            eye_spearman: r.eye_spearman.unwrap_or(f64::NAN),
            dynamic_ratio: r.dynamic.ratio,
            samples_per_ray: r.samples_per_ray,
        };
        write_out(out, s)
    })
}
