//! Three-stage training: head, lips fine-tuning, torso.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{lit, Adam, Grads, ParamGroup, ParamId, ParamStore, Tape};
use crate::dataset::{Dataset, Rect};
use crate::head::HeadCond;
use crate::losses;
use crate::model::{PortraitModel, FLAG_HEAD, FLAG_LIPS, FLAG_TORSO};
use crate::occupancy::DensityCondition;
use crate::render::{composite_over_plate, generate_rays, render_head, sample_rays, Sampling};
use crate::torso::pixel_coords;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Head,
    Lips,
    Torso,
}

impl Stage {
    fn salt(self) -> u64 {
        match self {
            Stage::Head => 0x4845_4144,
            Stage::Lips => 0x4c49_5053,
            Stage::Torso => 0x544f_5253,
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub stage: Stage,
    pub frame: usize,
    pub color: f64,
    pub entropy: f64,
    pub dynamic: f64,
    #[serde(rename = "struct")]
    pub structural: f64,
    pub total: f64,
    pub lambda_entropy: f64,
    pub lambda_dynamic: f64,
    pub lambda_struct: f64,
    pub lr_net: f64,
    pub lr_grid: f64,
    pub samples: usize,
}

/// Drives training of one model against one dataset.
pub struct Trainer<'a> {
    pub model: &'a mut PortraitModel,
    pub data: &'a Dataset,
    /// Line-delimited [`LossReport`] records go here.
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint: Option<PathBuf>,
    /// Every report, in order.
    pub history: Vec<LossReport>,
    /// Prints a progress line to stderr every this many steps.
    pub progress: Option<u64>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut PortraitModel, data: &'a Dataset) -> Result<Self, Error> {
        if data.logits.logit_dim != model.logit_dim {
            return Err(Error::Validation(format!(
                "dataset logits have dimension {}, the model expects {}",
                data.logits.logit_dim, model.logit_dim
            )));
        }
        if data.train_frames().len() > model.num_embeddings {
            return Err(Error::Validation(format!(
                "dataset has {} training frames but the model holds {} embeddings",
                data.train_frames().len(),
                model.num_embeddings
            )));
        }
        Ok(Self { model, data, log: None, checkpoint: None, history: Vec::new(), progress: None })
    }

    fn rng(&self, stage: Stage) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.model.config.seed ^ stage.salt())
    }

    fn emit(&mut self, report: LossReport) -> Result<(), Error> {
        let every = self.model.config.log_interval.max(1);
        if let Some(w) = self.log.as_mut() {
            if report.step % every == 0 || report.step == 1 {
                let line = serde_json::to_string(&report)?;
                writeln!(w, "{line}").map_err(|e| Error::io("<log>", e))?;
            }
        }
        if self.progress.is_some_and(|e| e > 0 && report.step % e == 0) {
            eprintln!(
                "{:?} step {}: total {:.5} color {:.5} samples {} lr {:.2e}",
                report.stage, report.step, report.total, report.color, report.samples, report.lr_net
            );
        }
        self.history.push(report);
        Ok(())
    }

    fn save(&self) -> Result<(), Error> {
        match &self.checkpoint {
            Some(p) => self.model.save(p),
            None => Ok(()),
        }
    }

    fn finish_step(&mut self, adam: &mut Adam<f32>, grads: &Grads<f32>, step: u64) -> Result<(), Error> {
        adam.step(&mut self.model.params, grads);
        self.model.ema.update(&self.model.params);
        let every = self.model.config.checkpoint_interval;
        if every > 0 && step % every == 0 {
            self.save()?;
        }
        Ok(())
    }

    fn lrs(adam: &Adam<f32>) -> (f64, f64) {
        (adam.current_lr(ParamGroup::Network), adam.current_lr(ParamGroup::Grid))
    }

    /// Density condition of a training frame under `params`.
    fn density_condition(&self, params: &ParamStore<f32>, frame: usize) -> Result<DensityCondition, Error> {
        let f = &self.data.frames[frame];
        let mut tape = Tape::inference(params);
        let a = self.model.audio.code(&mut tape, &self.data.logits, f.audio_index)?;
        Ok(DensityCondition {
            audio: tape.value(a).to_vec(),
            eye: f.eye_ratio,
            embedding: self.data.embedding_index(frame),
        })
    }

    fn occupancy_update<R: Rng>(&mut self, params: &ParamStore<f32>, rng: &mut R) -> Result<(), Error> {
        let train = self.data.train_frames();
        let frame = train[rng.random_range(0..train.len())];
        let cond = self.density_condition(params, frame)?;
        let mut grid = std::mem::take(&mut self.model.occupancy);
        let r = grid.update_from_head(&self.model.head, params, &cond, rng);
        self.model.occupancy = grid;
        r
    }

    /// Clears the occupancy grid and rebuilds it from random training
    /// conditions under the EMA weights.
    pub fn recompute_occupancy<R: Rng>(&mut self, rng: &mut R) -> Result<(), Error> {
        let params = self.model.eval_params();
        self.model.occupancy.reset();
        for _ in 0..self.model.config.recompute_conditions {
            self.occupancy_update(&params, rng)?;
        }
        Ok(())
    }

    fn random_pixels<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let cam = &self.data.camera;
        let n = cam.width * cam.height;
        let pick: Vec<usize> = if count >= n { (0..n).collect() } else { sample(rng, n, count).into_vec() };
        pick.into_iter().map(|i| (i / cam.width, i % cam.width)).collect()
    }

    /// Forward and backward of the head losses over `pixels` of `frame`.
    /// `patch` switches on the structural term over a `h × w` patch.
    fn head_step<R: Rng>(
        &self,
        frame: usize,
        pixels: &[(usize, usize)],
        sampling: Sampling,
        occupancy: bool,
        patch: Option<(usize, usize)>,
        rng: &mut R,
    ) -> Result<(LossReport, Grads<f32>), Error> {
        let cfg = &self.model.config;
        let data = self.data;
        let f = &data.frames[frame];
        let w = data.camera.width;
        let rays = generate_rays(&data.camera, &f.pose, pixels);
        let jitter: Vec<f64> = (0..rays.len()).map(|_| rng.random::<f64>()).collect();
        let grid = occupancy.then_some(&self.model.occupancy);
        let batch = sample_rays(&rays, sampling, grid, &jitter);

        let mut tape = Tape::new(&self.model.params);
        let audio = self.model.audio.code(&mut tape, &data.logits, f.audio_index)?;
        let cond = HeadCond { audio, eye: f.eye_ratio, embedding: data.embedding_index(frame) };
        let out = render_head(&mut tape, &self.model.head, &cond, &batch)?;
        let gather3 = |img: &[f32]| -> Vec<f32> {
            pixels.iter().flat_map(|&(r, c)| img[(r * w + c) * 3..(r * w + c) * 3 + 3].iter().copied()).collect()
        };
        let pred = composite_over_plate(&mut tape, &out, &gather3(&f.plate))?;
        let gt = tape.constant(gather3(&f.image), pixels.len(), 3)?;
        let non_face: Vec<u32> =
            pixels.iter().enumerate().filter(|(_, &(r, c))| !f.face[r * w + c]).map(|(i, _)| i as u32).collect();

        let (color, structural) = match patch {
            Some((ph, pw)) => {
                let (_, mse, st) = losses::lips(&mut tape, pred, gt, ph, pw, cfg.lambda_struct)?;
                (mse, Some(st))
            }
            None => (losses::color_mse(&mut tape, pred, gt)?, None),
        };
        let entropy = losses::entropy(&mut tape, out.opacity)?;
        let dynamic = losses::dynamic(&mut tape, out.audio_coord, &non_face)?;
        let e = tape.scale(entropy, lit(cfg.lambda_entropy));
        let d = tape.scale(dynamic, lit(cfg.lambda_dynamic));
        let mut total = tape.add(color, e)?;
        total = tape.add(total, d)?;
        if let Some(st) = structural {
            let s = tape.scale(st, lit(cfg.lambda_struct));
            total = tape.add(total, s)?;
        }
        tape.backward(total)?;
        let report = LossReport {
            step: 0,
            stage: if patch.is_some() { Stage::Lips } else { Stage::Head },
            frame,
            color: tape.scalar(color) as f64,
            entropy: tape.scalar(entropy) as f64,
            dynamic: tape.scalar(dynamic) as f64,
            structural: structural.map(|s| tape.scalar(s) as f64).unwrap_or(0.0),
            total: tape.scalar(total) as f64,
            lambda_entropy: cfg.lambda_entropy,
            lambda_dynamic: cfg.lambda_dynamic,
            lambda_struct: if patch.is_some() { cfg.lambda_struct } else { 0.0 },
            lr_net: 0.0,
            lr_grid: 0.0,
            samples: batch.num_samples(),
        };
        Ok((report, tape.into_grads()))
    }

    fn adam(&self, ids: Vec<ParamId>, steps: u64) -> Adam<f32> {
        Adam::new(self.model.config.adam(), &self.model.params, ids, steps)
    }

    /// Stage 1. During warm-up the whole chord is sampled coarsely with
    /// `max_samples` strata and no pruning; the grid is rebuilt when warm-up
    /// ends and again when the stage completes.
    pub fn train_head(&mut self) -> Result<(), Error> {
        let cfg = self.model.config.clone();
        let mut rng = self.rng(Stage::Head);
        let train = self.data.train_frames();
        let mut adam = self.adam(self.model.head_ids(), cfg.head_steps);
        self.model.occupancy = crate::occupancy::OccupancyGrid::new(cfg.occupancy_resolution, cfg.occupancy_threshold);
        for step in 1..=cfg.head_steps {
            let warm = step <= cfg.warmup_steps;
            let frame = train[rng.random_range(0..train.len())];
            let pixels = self.random_pixels(cfg.rays_per_step, &mut rng);
            let sampling = if warm { Sampling::Dense { candidates: cfg.max_samples } } else { cfg.sampling() };
            let (mut report, grads) = self.head_step(frame, &pixels, sampling, !warm && cfg.prune, None, &mut rng)?;
            (report.lr_net, report.lr_grid) = Self::lrs(&adam);
            self.finish_step(&mut adam, &grads, step)?;
            report.step = step;
            self.emit(report)?;
            if cfg.occupancy_interval > 0 && step % cfg.occupancy_interval == 0 {
                let params = self.model.params.clone();
                self.occupancy_update(&params, &mut rng)?;
            }
            if step == cfg.warmup_steps {
                self.recompute_occupancy(&mut rng)?;
            }
        }
        self.recompute_occupancy(&mut rng)?;
        self.model.flags |= FLAG_HEAD;
        self.save()
    }

    /// Square patch around a frame's lips rectangle.
    pub fn lips_patch(&self, frame: usize) -> Rect {
        let cam = &self.data.camera;
        self.data.frames[frame].lips.centered_patch(self.model.config.lips_patch, cam.width, cam.height)
    }

    /// Stage 2: whole-patch rays around the lips with the structural loss.
    /// The occupancy grid stays frozen.
    pub fn finetune_lips(&mut self) -> Result<(), Error> {
        if !self.model.has(FLAG_HEAD) {
            return Err(Error::Validation("lips fine-tuning needs a checkpoint with a trained head".into()));
        }
        let cfg = self.model.config.clone();
        let mut rng = self.rng(Stage::Lips);
        let train = self.data.train_frames();
        let mut adam = self.adam(self.model.head_ids(), cfg.lips_steps);
        for step in 1..=cfg.lips_steps {
            let frame = train[rng.random_range(0..train.len())];
            let patch = self.lips_patch(frame);
            let pixels = patch.pixels();
            let (mut report, grads) =
                self.head_step(frame, &pixels, cfg.sampling(), cfg.prune, Some((patch.h, patch.w)), &mut rng)?;
            (report.lr_net, report.lr_grid) = Self::lrs(&adam);
            self.finish_step(&mut adam, &grads, step)?;
            report.step = step;
            self.emit(report)?;
        }
        self.model.flags |= FLAG_LIPS;
        self.save()
    }

    /// Stage 3: per-pixel torso fit against the in-painted plates.
    pub fn train_torso(&mut self) -> Result<(), Error> {
        if !self.model.has(FLAG_HEAD) {
            return Err(Error::Validation(
                "torso training needs a checkpoint whose head stage is complete; run train-head first".into(),
            ));
        }
        let cfg = self.model.config.clone();
        let mut rng = self.rng(Stage::Torso);
        let train = self.data.train_frames();
        let mut adam = self.adam(self.model.torso_ids(), cfg.torso_steps);
        let w = self.data.camera.width;
        for step in 1..=cfg.torso_steps {
            let frame = train[rng.random_range(0..train.len())];
            let pixels = self.random_pixels(cfg.torso_pixels_per_step, &mut rng);
            let (mut report, grads) = {
                let f = &self.data.frames[frame];
                let gather3 = |img: &[f32]| -> Vec<f32> {
                    pixels.iter().flat_map(|&(r, c)| img[(r * w + c) * 3..(r * w + c) * 3 + 3].iter().copied()).collect()
                };
                let n = pixels.len();
                let mut tape = Tape::new(&self.model.params);
                let coords = pixel_coords(&self.data.camera, &pixels).into_iter().map(|v| v as f32).collect();
                let x = tape.constant(coords, n, 2)?;
                let out = self.model.torso.query(&mut tape, x, &f.pose, self.data.embedding_index(frame))?;
                let bg = tape.constant(gather3(&self.data.background), n, 3)?;
                let a3 = tape.gather(out.alpha, (0..n as u32).flat_map(|i| [i, i, i]).collect(), n, 3)?;
                let diff = tape.sub(out.rgb, bg)?;
                let lifted = tape.mul(a3, diff)?;
                let pred = tape.add(bg, lifted)?;
                let gt = tape.constant(gather3(&f.plate), n, 3)?;
                let color = losses::color_mse(&mut tape, pred, gt)?;
                let entropy = losses::entropy(&mut tape, out.alpha)?;
                let e = tape.scale(entropy, cfg.lambda_entropy as f32);
                let total = tape.add(color, e)?;
                tape.backward(total)?;
                let report = LossReport {
                    step,
                    stage: Stage::Torso,
                    frame,
                    color: tape.scalar(color) as f64,
                    entropy: tape.scalar(entropy) as f64,
                    dynamic: 0.0,
                    structural: 0.0,
                    total: tape.scalar(total) as f64,
                    lambda_entropy: cfg.lambda_entropy,
                    lambda_dynamic: 0.0,
                    lambda_struct: 0.0,
                    lr_net: 0.0,
                    lr_grid: 0.0,
                    samples: n,
                };
                (report, tape.into_grads())
            };
            (report.lr_net, report.lr_grid) = Self::lrs(&adam);
            self.finish_step(&mut adam, &grads, step)?;
            self.emit(report)?;
        }
        self.model.flags |= FLAG_TORSO;
        self.save()
    }
}

/// Mean of the first and last `window` totals of a report stream.
pub fn windowed_means(reports: &[LossReport], window: usize) -> Option<(f64, f64)> {
    if reports.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[LossReport]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    Some((mean(&reports[..window]), mean(&reports[reports.len() - window..])))
}
