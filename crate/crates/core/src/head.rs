//! Head radiance field: a 3D spatial grid modulated by a D-dimensional audio
//! grid queried at a spatially dependent audio coordinate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{lit, ParamGroup, ParamId, ParamStore, Real, Tape, TensorError, Var};
use crate::grid::{GridConfig, HashGridEncoder};
use crate::nn::{dense, split_first_layer, Layer};
use crate::Error;

/// Upper end of the typical eye-area ratio range.
pub const EYE_RATIO_MAX: f64 = 0.005;

/// Initial raw density: `σ = e^-2 ≈ 0.14`, well under the default occupancy
/// threshold, so untrained space starts out empty.
pub const DENSITY_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub audio_dim: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub geo_feat: usize,
    pub embed_dim: usize,
    pub grid: GridConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { audio_dim: 2, code_dim: 64, hidden: 64, geo_feat: 64, embed_dim: 8, grid: GridConfig::default() }
    }
}

/// Per-step condition shared by every sample in a batch.
#[derive(Debug, Clone, Copy)]
pub struct HeadCond<T> {
    /// `[1, code_dim]` audio code.
    pub audio: Var,
    /// Eye-area ratio `e`.
    pub eye: T,
    /// Row of the appearance embedding table.
    pub embedding: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[n, 1]`, nonnegative.
    pub sigma: Var,
    /// `[n, 3]` in `[0, 1]`.
    pub color: Var,
    /// `[n, D]` in `[0, 1]`.
    pub audio_coord: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub config: HeadConfig,
    pub spatial: HashGridEncoder,
    pub audio_grid: HashGridEncoder,
    audio_mlp: [Layer; 3],
    density_mlp: [Layer; 3],
    color_mlp: [Layer; 2],
    pub embeddings: ParamId,
    pub num_embeddings: usize,
}

impl HeadModel {
    pub fn new<T: Real, R: Rng>(
        config: HeadConfig,
        num_embeddings: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        assert!((1..=3).contains(&config.audio_dim), "audio coordinate dimension must be 1, 2 or 3");
        let spatial = HashGridEncoder::new("head.spatial", 3, config.grid, store, rng);
        let audio_grid = HashGridEncoder::new("head.audio_grid", config.audio_dim, config.grid, store, rng);
        let (h, f) = (config.hidden, spatial.output_dim());
        let audio_mlp = [
            dense(store, rng, "head.audio_mlp.0", f + config.code_dim, h),
            dense(store, rng, "head.audio_mlp.1", h, h),
            dense(store, rng, "head.audio_mlp.2", h, config.audio_dim),
        ];
        let density_in = f + audio_grid.output_dim() + 1 + config.embed_dim;
        let density_mlp = [
            dense(store, rng, "head.density_mlp.0", density_in, h),
            dense(store, rng, "head.density_mlp.1", h, h),
            dense(store, rng, "head.density_mlp.2", h, 1 + config.geo_feat),
        ];
        store.value_mut(density_mlp[2].bias)[0] = lit(DENSITY_BIAS_INIT);
        let color_mlp = [
            dense(store, rng, "head.color_mlp.0", config.geo_feat, h),
            dense(store, rng, "head.color_mlp.1", h, 3),
        ];
        let embeddings = store.add_uniform(
            "head.embeddings",
            num_embeddings.max(1),
            config.embed_dim,
            ParamGroup::Network,
            0.1,
            rng,
        );
        Self {
            config,
            spatial,
            audio_grid,
            audio_mlp,
            density_mlp,
            color_mlp,
            embeddings,
            num_embeddings: num_embeddings.max(1),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.spatial.param_ids();
        ids.extend(self.audio_grid.param_ids());
        ids.extend(self.mlp_ids());
        ids.push(self.embeddings);
        ids
    }

    fn mlp_ids(&self) -> Vec<ParamId> {
        self.audio_mlp
            .iter()
            .chain(&self.density_mlp)
            .chain(&self.color_mlp)
            .flat_map(|l| l.ids())
            .collect()
    }

    /// Corner reads per sample per level over both encoders: `2³ + 2^D`.
    pub fn corners_per_level(&self) -> usize {
        self.spatial.corners_per_level() + self.audio_grid.corners_per_level()
    }

    /// `x_a = sigmoid(audio_mlp(f ⊕ a))` for spatial features `f: [n, 32]`.
    pub fn audio_coordinate<T: Real>(&self, tape: &mut Tape<'_, T>, f: Var, audio: Var) -> Result<Var, TensorError> {
        let h = split_first_layer(tape, &self.audio_mlp[0], f, Some(audio))?;
        let h = tape.relu(h);
        let h = self.audio_mlp[1].forward(tape, h)?;
        let h = tape.relu(h);
        let out = self.audio_mlp[2].forward(tape, h)?;
        Ok(tape.sigmoid(out))
    }

    /// Density, geometry feature and audio coordinate, without color.
    pub fn geometry<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        cond: &HeadCond<T>,
    ) -> Result<(Var, Var, Var), TensorError> {
        let n = tape.shape(x).0;
        tape.stats_mut().field_queries += n as u64;
        let f = self.spatial.encode(tape, x)?;
        let xa = self.audio_coordinate(tape, f, cond.audio)?;
        let g = self.audio_grid.encode(tape, xa)?;
        let fg = tape.concat_cols(&[f, g])?;
        let cond_row = self.condition_row(tape, cond)?;
        let h = split_first_layer(tape, &self.density_mlp[0], fg, Some(cond_row))?;
        let h = tape.relu(h);
        let h = self.density_mlp[1].forward(tape, h)?;
        let h = tape.relu(h);
        let out = self.density_mlp[2].forward(tape, h)?;
        let raw = tape.slice_cols(out, 0, 1)?;
        let sigma = tape.trunc_exp(raw);
        let geo = tape.slice_cols(out, 1, self.config.geo_feat)?;
        Ok((sigma, geo, xa))
    }

    /// Full query: `(σ, c, x_a)` for canonical points `x: [n, 3]`.
    pub fn query<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, cond: &HeadCond<T>) -> Result<HeadOutput, TensorError> {
        let (sigma, geo, audio_coord) = self.geometry(tape, x, cond)?;
        let h = self.color_mlp[0].forward(tape, geo)?;
        let h = tape.relu(h);
        let out = self.color_mlp[1].forward(tape, h)?;
        let color = tape.sigmoid(out);
        Ok(HeadOutput { sigma, color, audio_coord })
    }

    /// `[e / e_max ⊕ i]`, the per-condition part of the density input. The
    /// eye ratio is rescaled so that its typical range maps to `[0, 1]`.
    fn condition_row<T: Real>(&self, tape: &mut Tape<'_, T>, cond: &HeadCond<T>) -> Result<Var, TensorError> {
        let eye = tape.constant(vec![cond.eye * lit(1.0 / EYE_RATIO_MAX)], 1, 1)?;
        let table = tape.param(self.embeddings);
        let row = cond.embedding.min(self.num_embeddings - 1);
        let emb = tape.slice_rows(table, row, 1)?;
        tape.concat_cols(&[eye, emb])
    }
}

/// Eye-area ratio from 2D eye contours: total shoelace area over image area,
/// clamped to `[0, 0.01]`.
pub fn eye_feature_from_landmarks(contours: &[Vec<[f64; 2]>], image_area: f64) -> Result<f64, Error> {
    if image_area <= 0.0 {
        return Err(Error::Contract(format!("image area must be positive, got {image_area}")));
    }
    let mut area = 0.0;
    for (k, c) in contours.iter().enumerate() {
        if c.len() < 3 {
            return Err(Error::Contract(format!("eye contour {k} has {} points, need at least 3", c.len())));
        }
        let mut twice = 0.0;
        for i in 0..c.len() {
            let (p, q) = (c[i], c[(i + 1) % c.len()]);
            twice += p[0] * q[1] - q[0] * p[1];
        }
        area += twice.abs() * 0.5;
    }
    Ok((area / image_area).clamp(0.0, 0.01))
}
