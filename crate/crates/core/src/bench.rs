//! Inference throughput.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::eval::{render_frame, sequence_codes, RenderOptions};
use crate::model::PortraitModel;
use crate::render::Sampling;
use crate::Error;

pub const WARMUP_FRAMES: usize = 10;
pub const TIMED_FRAMES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub prune: bool,
    pub candidates: usize,
    pub max_samples: usize,
    pub warmup_frames: usize,
    pub timed_frames: usize,
    pub median_frame_seconds: f64,
    pub frames_per_sec: f64,
    pub rays_per_sec: f64,
    pub samples_per_ray: f64,
    pub width: usize,
    pub height: usize,
    pub threads: usize,
    pub profile: String,
    pub arch: String,
    pub os: String,
}

pub fn build_profile() -> &'static str {
    if cfg!(debug_assertions) {
        "debug"
    } else {
        "release"
    }
}

/// Renders `warmup` untimed frames, then `timed` timed ones, cycling
/// through the test split (or every frame when it is empty).
pub fn bench(model: &PortraitModel, data: &Dataset, opts: &RenderOptions, warmup: usize, timed: usize) -> Result<BenchReport, Error> {
    if timed == 0 {
        return Err(Error::Validation("bench needs at least one timed frame".into()));
    }
    let mut frames = data.test_frames();
    if frames.is_empty() {
        frames = (0..data.frames.len()).collect();
    }
    let params = model.eval_params();
    let codes = sequence_codes(model, &params, data, model.config.beta)?;
    let mut times = Vec::with_capacity(timed);
    let mut samples = 0usize;
    for k in 0..warmup + timed {
        let i = frames[k % frames.len()];
        let t0 = Instant::now();
        let r = render_frame(model, &params, data, i, &codes[data.frames[i].audio_index], opts)?;
        let dt = t0.elapsed().as_secs_f64();
        if k >= warmup {
            times.push(dt);
            samples += r.head.samples;
        }
    }
    times.sort_by(f64::total_cmp);
    let median = if timed % 2 == 1 { times[timed / 2] } else { 0.5 * (times[timed / 2 - 1] + times[timed / 2]) };
    let pixels = data.num_pixels();
    let (prune, candidates, max_samples) = match opts.sampling {
        Sampling::Pruned { candidates, max_samples } => (true, candidates, max_samples),
        Sampling::Dense { candidates } => (false, candidates, candidates),
    };
    Ok(BenchReport {
        prune,
        candidates,
        max_samples,
        warmup_frames: warmup,
        timed_frames: timed,
        median_frame_seconds: median,
        frames_per_sec: 1.0 / median,
        rays_per_sec: pixels as f64 / median,
        samples_per_ray: samples as f64 / (pixels * timed) as f64,
        width: data.camera.width,
        height: data.camera.height,
        threads: rayon::current_num_threads(),
        profile: build_profile().into(),
        arch: std::env::consts::ARCH.into(),
        os: std::env::consts::OS.into(),
    })
}
