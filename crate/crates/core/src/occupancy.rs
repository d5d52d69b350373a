//! Running-maximum density cache over the canonical head cube, thresholded
//! into the bitfield the sampler uses to skip empty space.

use rand::Rng;
use rayon::prelude::*;

use crate::autograd::{ParamStore, Tape};
use crate::head::{HeadCond, HeadModel};
use crate::Error;

pub const DEFAULT_RESOLUTION: usize = 64;
/// Density whose optical thickness over one default candidate step
/// (`1/128` of the unit cube) is 0.01.
pub const DEFAULT_THRESHOLD: f32 = 1.28;

/// Density condition used for an update.
#[derive(Debug, Clone)]
pub struct DensityCondition {
    pub audio: Vec<f32>,
    pub eye: f32,
    pub embedding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub threshold: f32,
    values: Vec<f32>,
    bits: Vec<bool>,
}

impl Default for OccupancyGrid {
    fn default() -> Self {
        Self::new(DEFAULT_RESOLUTION, DEFAULT_THRESHOLD)
    }
}

impl OccupancyGrid {
    /// Every voxel starts at `−∞`, hence unoccupied.
    pub fn new(resolution: usize, threshold: f32) -> Self {
        let n = resolution.pow(3);
        Self { resolution, threshold, values: vec![f32::NEG_INFINITY; n], bits: vec![false; n] }
    }

    pub fn from_values(resolution: usize, threshold: f32, values: Vec<f32>) -> Result<Self, Error> {
        if values.len() != resolution.pow(3) {
            return Err(Error::Checkpoint(format!(
                "occupancy block holds {} values, expected {}^3",
                values.len(),
                resolution
            )));
        }
        let mut g = Self { resolution, threshold, values, bits: Vec::new() };
        g.refresh_bits();
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Voxel `floor(x·R)` per axis, clamped to `[0, R−1]`.
    pub fn voxel_coords(&self, x: [f64; 3]) -> [usize; 3] {
        let r = self.resolution;
        let mut v = [0usize; 3];
        for k in 0..3 {
            let c = (x[k] * r as f64).floor();
            v[k] = if c <= 0.0 { 0 } else { (c as usize).min(r - 1) };
        }
        v
    }

    pub fn voxel_index(&self, x: [f64; 3]) -> usize {
        let [i, j, k] = self.voxel_coords(x);
        (k * self.resolution + j) * self.resolution + i
    }

    pub fn is_occupied(&self, x: [f64; 3]) -> bool {
        self.bits[self.voxel_index(x)]
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    /// `values[v] ← max(values[v], density[v])`, then re-thresholds.
    pub fn merge_max(&mut self, density: &[f32]) {
        assert_eq!(density.len(), self.values.len(), "density sample count must match voxel count");
        for (v, &d) in self.values.iter_mut().zip(density) {
            if d > *v {
                *v = d;
            }
        }
        self.refresh_bits();
    }

    /// Back to the never-updated state.
    pub fn reset(&mut self) {
        self.values.fill(f32::NEG_INFINITY);
        self.bits.fill(false);
    }

    /// Effective cutoff: the configured threshold, lowered to the mean cached
    /// density while the field is still uniformly thin, so early training
    /// never prunes every sample away.
    pub fn effective_threshold(&self) -> f32 {
        let (sum, n) = self.values.iter().filter(|v| v.is_finite()).fold((0.0f64, 0usize), |(s, n), &v| (s + v as f64, n + 1));
        if n == 0 {
            return self.threshold;
        }
        self.threshold.min((sum / n as f64) as f32)
    }

    fn refresh_bits(&mut self) {
        let t = self.effective_threshold();
        self.bits = self.values.iter().map(|&v| v > t).collect();
    }

    /// One jittered point per voxel, voxel-index order.
    pub fn jittered_points<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        let r = self.resolution;
        let inv = 1.0 / r as f64;
        let mut pts = Vec::with_capacity(self.len() * 3);
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    for c in [i, j, k] {
                        pts.push(((c as f64 + rng.random::<f64>()) * inv) as f32);
                    }
                }
            }
        }
        pts
    }

    /// Evaluates the head density once per voxel under one condition and
    /// folds it into the running maximum.
    pub fn update_from_head<R: Rng>(
        &mut self,
        head: &HeadModel,
        params: &ParamStore<f32>,
        cond: &DensityCondition,
        rng: &mut R,
    ) -> Result<(), Error> {
        let pts = self.jittered_points(rng);
        let density = head_density(head, params, cond, &pts)?;
        self.merge_max(&density);
        Ok(())
    }
}

/// Head density at `[n, 3]` points, evaluated in parallel chunks.
pub fn head_density(
    head: &HeadModel,
    params: &ParamStore<f32>,
    cond: &DensityCondition,
    points: &[f32],
) -> Result<Vec<f32>, Error> {
    const CHUNK: usize = 8192;
    let parts: Result<Vec<Vec<f32>>, Error> = points
        .par_chunks(CHUNK * 3)
        .map(|chunk| {
            let mut tape = Tape::inference(params);
            let x = tape.constant(chunk.to_vec(), chunk.len() / 3, 3)?;
            let audio = tape.constant(cond.audio.clone(), 1, cond.audio.len())?;
            let c = HeadCond { audio, eye: cond.eye, embedding: cond.embedding };
            let (sigma, _, _) = head.geometry(&mut tape, x, &c)?;
            Ok(tape.value(sigma).to_vec())
        })
        .collect();
    Ok(parts?.concat())
}
