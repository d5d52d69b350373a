//! Frame rendering from a trained model and the evaluation report.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::momentum_smooth;
use crate::autograd::ParamStore;
use crate::dataset::{Dataset, Split};
use crate::metrics;
use crate::model::{PortraitModel, FLAG_TORSO};
use crate::render::{render_head_frame, FrameCondition, HeadFrame, Sampling};
use crate::torso::{render_torso, TorsoFrame};
use crate::Error;

/// What the head is composited over.
#[derive(Debug, Clone, PartialEq)]
pub enum Backdrop {
    /// The dataset's per-frame torso-over-background plate.
    Plate,
    /// The rendered torso over this background image.
    Torso(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub sampling: Sampling,
    pub eye_ratio: Option<f32>,
    pub embedding: usize,
    pub backdrop: Backdrop,
}

impl RenderOptions {
    /// Options from the model's config: the rendered torso when it has been
    /// trained, otherwise the dataset plate.
    pub fn for_model(model: &PortraitModel, data: &Dataset, background: Option<Vec<f32>>) -> Self {
        let cfg = &model.config;
        let backdrop = if model.has(FLAG_TORSO) {
            Backdrop::Torso(background.unwrap_or_else(|| data.background.clone()))
        } else {
            Backdrop::Plate
        };
        Self {
            sampling: cfg.sampling(),
            eye_ratio: cfg.eye_ratio.map(|e| e as f32),
            embedding: cfg.test_embedding,
            backdrop,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    /// `[H·W, 3]` composite.
    pub image: Vec<f32>,
    pub head: HeadFrame,
    pub torso: Option<TorsoFrame>,
}

/// Audio codes for every frame of the track with momentum `β`, in frame order.
pub fn sequence_codes(model: &PortraitModel, params: &ParamStore<f32>, data: &Dataset, beta: f64) -> Result<Vec<Vec<f32>>, Error> {
    let raw = model.audio_codes(params, &data.logits)?;
    Ok(momentum_smooth(&raw, beta))
}

pub fn render_frame(
    model: &PortraitModel,
    params: &ParamStore<f32>,
    data: &Dataset,
    frame: usize,
    code: &[f32],
    opts: &RenderOptions,
) -> Result<RenderedFrame, Error> {
    let f = &data.frames[frame];
    let cond = FrameCondition {
        audio: code.to_vec(),
        eye: opts.eye_ratio.unwrap_or(f.eye_ratio),
        embedding: opts.embedding,
    };
    let grid = matches!(opts.sampling, Sampling::Pruned { .. }).then_some(&model.occupancy);
    let head = render_head_frame(&model.head, params, grid, &data.camera, &f.pose, &cond, opts.sampling)?;
    let (under, torso) = match &opts.backdrop {
        Backdrop::Plate => (f.plate.clone(), None),
        Backdrop::Torso(bg) => {
            let t = render_torso(&model.torso, params, &data.camera, &f.pose, opts.embedding)?;
            let under = (0..bg.len())
                .map(|i| {
                    let a = t.alpha[i / 3];
                    t.rgb[i] * a + (1.0 - a) * bg[i]
                })
                .collect();
            (under, Some(t))
        }
    };
    let image = (0..under.len()).map(|i| head.rgb[i] + (1.0 - head.opacity[i / 3]) * under[i]).collect();
    Ok(RenderedFrame { image, head, torso })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mouth_pred: usize,
    pub mouth_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicStats {
    pub face_mean: f64,
    pub non_face_mean: f64,
    pub ratio: f64,
    pub face_rays: usize,
    pub non_face_rays: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub frames: Vec<FrameEval>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Pearson correlation of rendered vs ground-truth mouth-cavity pixel
    /// counts; `null` when either series is constant.
    pub mouth_correlation: f64,
    pub eye_sweep: Vec<(f64, usize)>,
    pub eye_spearman: Option<f64>,
    pub dynamic: DynamicStats,
    pub rays_per_sec: f64,
    pub frames_per_sec: f64,
    pub samples_per_ray: f64,
    pub width: usize,
    pub height: usize,
    pub max_samples: usize,
    pub prune: bool,
    pub beta: f64,
}

/// Opacity a ray needs before its audio coordinate counts.
pub const DYNAMIC_OPACITY: f32 = 0.5;
pub const EYE_SWEEP: usize = 11;

/// Centred `|x_a|` over opaque face and non-face rays of a rendered frame.
pub fn dynamic_sums(head: &HeadFrame, face: &[bool], d: usize) -> (f64, usize, f64, usize) {
    let (mut fs, mut fc, mut ns, mut nc) = (0.0, 0, 0.0, 0);
    for (i, &o) in head.opacity.iter().enumerate() {
        if o <= DYNAMIC_OPACITY {
            continue;
        }
        let v: f64 = head.audio_coord[i * d..(i + 1) * d].iter().map(|&x| (x as f64 - 0.5).abs()).sum();
        if face[i] {
            fs += v;
            fc += 1;
        } else {
            ns += v;
            nc += 1;
        }
    }
    (fs, fc, ns, nc)
}

/// Renders every frame of `split` with the EMA weights and scores it.
pub fn evaluate(model: &PortraitModel, data: &Dataset, split: Split, opts: &RenderOptions) -> Result<EvalReport, Error> {
    let frames = data.frames_in(split);
    if frames.is_empty() {
        return Err(Error::Validation(format!("split {split:?} has no frames")));
    }
    let params = model.eval_params();
    let codes = sequence_codes(model, &params, data, model.config.beta)?;
    let d = model.head.config.audio_dim;
    let w = data.camera.width;
    let mut per = Vec::new();
    let (mut fs, mut fc, mut ns, mut nc) = (0.0, 0, 0.0, 0);
    let mut elapsed = 0.0;
    let mut samples = 0usize;
    for &i in &frames {
        let f = &data.frames[i];
        let t0 = Instant::now();
        let r = render_frame(model, &params, data, i, &codes[f.audio_index], opts)?;
        elapsed += t0.elapsed().as_secs_f64();
        samples += r.head.samples;
        let (a, b, c, e) = dynamic_sums(&r.head, &f.face, d);
        fs += a;
        fc += b;
        ns += c;
        nc += e;
        per.push(FrameEval {
            frame: i,
            psnr: metrics::psnr(&r.image, &f.image),
            ssim: metrics::ssim(&r.image, &f.image, w, data.camera.height),
            mouth_pred: metrics::dark_count(&r.image, w, &f.lips),
            mouth_gt: metrics::dark_count(&f.image, w, &f.lips),
        });
    }
    let n = per.len() as f64;
    let pred: Vec<f64> = per.iter().map(|p| p.mouth_pred as f64).collect();
    let gt: Vec<f64> = per.iter().map(|p| p.mouth_gt as f64).collect();
    let mouth_correlation = metrics::pearson(&pred, &gt);
    if mouth_correlation.is_nan() {
        eprintln!("warning: mouth-opening series is constant, correlation undefined");
    }

    let (eye_sweep, eye_spearman) = eye_sweep(model, &params, data, frames[0], &codes, opts)?;
    let face_mean = if fc > 0 { fs / fc as f64 } else { 0.0 };
    let non_face_mean = if nc > 0 { ns / nc as f64 } else { 0.0 };
    let pixels = (data.num_pixels() * frames.len()) as f64;
    let (max_samples, prune) = match opts.sampling {
        Sampling::Pruned { max_samples, .. } => (max_samples, true),
        Sampling::Dense { candidates } => (candidates, false),
    };
    Ok(EvalReport {
        split,
        mean_psnr: per.iter().map(|p| p.psnr).sum::<f64>() / n,
        mean_ssim: per.iter().map(|p| p.ssim).sum::<f64>() / n,
        frames: per,
        mouth_correlation,
        eye_sweep,
        eye_spearman,
        dynamic: DynamicStats {
            face_mean,
            non_face_mean,
            ratio: if face_mean > 0.0 { non_face_mean / face_mean } else { f64::NAN },
            face_rays: fc,
            non_face_rays: nc,
        },
        rays_per_sec: pixels / elapsed.max(1e-12),
        frames_per_sec: n / elapsed.max(1e-12),
        samples_per_ray: samples as f64 / pixels,
        width: w,
        height: data.camera.height,
        max_samples,
        prune,
        beta: model.config.beta,
    })
}

/// Renders `frame` with `e` swept over `[0, 0.005]` and counts dark pixels
/// inside the frame's eye rectangle.
pub fn eye_sweep(
    model: &PortraitModel,
    params: &ParamStore<f32>,
    data: &Dataset,
    frame: usize,
    codes: &[Vec<f32>],
    opts: &RenderOptions,
) -> Result<(Vec<(f64, usize)>, Option<f64>), Error> {
    let f = &data.frames[frame];
    let Some(rect) = f.eye_rect else { return Ok((Vec::new(), None)) };
    let mut sweep = Vec::with_capacity(EYE_SWEEP);
    for k in 0..EYE_SWEEP {
        let e = crate::head::EYE_RATIO_MAX * k as f64 / (EYE_SWEEP - 1) as f64;
        let o = RenderOptions { eye_ratio: Some(e as f32), ..opts.clone() };
        let r = render_frame(model, params, data, frame, &codes[f.audio_index], &o)?;
        sweep.push((e, metrics::dark_count(&r.image, data.camera.width, &rect)));
    }
    let es: Vec<f64> = sweep.iter().map(|s| s.0).collect();
    let areas: Vec<f64> = sweep.iter().map(|s| s.1 as f64).collect();
    Ok((sweep, Some(metrics::spearman(&es, &areas))))
}
