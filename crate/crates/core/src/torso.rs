//! Torso field: a pose-conditioned 2D deformation of image coordinates
//! into a 2D feature grid, one field evaluation per pixel.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{lit, ParamGroup, ParamId, ParamStore, Real, Tape, TensorError, Var};
use crate::grid::{GridConfig, HashGridEncoder};
use crate::nn::{dense, split_first_layer, Layer};
use crate::render::{Camera, Pose};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorsoConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub grid: GridConfig,
}

impl Default for TorsoConfig {
    fn default() -> Self {
        Self { hidden: 64, embed_dim: 8, grid: GridConfig::default() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TorsoOutput {
    /// `[n, 3]`.
    pub rgb: Var,
    /// `[n, 1]`.
    pub alpha: Var,
    /// `[n, 2]` deformation `Δx`.
    pub offset: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TorsoModel {
    pub config: TorsoConfig,
    pub grid: HashGridEncoder,
    deform_mlp: [Layer; 3],
    torso_mlp: [Layer; 2],
    pub embeddings: ParamId,
    pub num_embeddings: usize,
}

impl TorsoModel {
    pub fn new<T: Real, R: Rng>(
        config: TorsoConfig,
        num_embeddings: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let h = config.hidden;
        let deform_mlp = [
            dense(store, rng, "torso.deform_mlp.0", 2 + 12, h),
            dense(store, rng, "torso.deform_mlp.1", h, h),
            dense(store, rng, "torso.deform_mlp.2", h, 2),
        ];
        store.value_mut(deform_mlp[2].weight).fill(T::zero());
        let grid = HashGridEncoder::new("torso.grid", 2, config.grid, store, rng);
        let torso_mlp = [
            dense(store, rng, "torso.torso_mlp.0", grid.output_dim() + config.embed_dim, h),
            dense(store, rng, "torso.torso_mlp.1", h, 4),
        ];
        let n = num_embeddings.max(1);
        let embeddings = store.add_uniform("torso.embeddings", n, config.embed_dim, ParamGroup::Network, 0.1, rng);
        Self { config, grid, deform_mlp, torso_mlp, embeddings, num_embeddings: n }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.deform_mlp.iter().flat_map(|l| l.ids()).collect();
        ids.extend(self.grid.param_ids());
        ids.extend(self.torso_mlp.iter().flat_map(|l| l.ids()));
        ids.push(self.embeddings);
        ids
    }

    /// `Δx = deform(x_t ⊕ pose)`, `f_t = E(clamp(x_t + Δx))`,
    /// `(c_t, α_t) = sigmoid(torso_mlp(f_t ⊕ i_t))`.
    pub fn query<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        xt: Var,
        pose: &Pose,
        embedding: usize,
    ) -> Result<TorsoOutput, TensorError> {
        let n = tape.shape(xt).0;
        tape.stats_mut().field_queries += n as u64;
        let code = tape.constant(pose.code().iter().map(|&v| lit(v)).collect(), 1, 12)?;
        let h = split_first_layer(tape, &self.deform_mlp[0], xt, Some(code))?;
        let h = tape.relu(h);
        let h = self.deform_mlp[1].forward(tape, h)?;
        let h = tape.relu(h);
        let offset = self.deform_mlp[2].forward(tape, h)?;
        let moved = tape.add(xt, offset)?;
        let moved = tape.clamp(moved, T::zero(), T::one());
        let f = self.grid.encode(tape, moved)?;
        let table = tape.param(self.embeddings);
        let emb = tape.slice_rows(table, embedding.min(self.num_embeddings - 1), 1)?;
        let h = split_first_layer(tape, &self.torso_mlp[0], f, Some(emb))?;
        let h = tape.relu(h);
        let out = self.torso_mlp[1].forward(tape, h)?;
        let out = tape.sigmoid(out);
        Ok(TorsoOutput { rgb: tape.slice_cols(out, 0, 3)?, alpha: tape.slice_cols(out, 3, 1)?, offset })
    }
}

/// Normalized coordinates of pixel centres, `[n, 2]` as `(x, y)`.
pub fn pixel_coords(camera: &Camera, pixels: &[(usize, usize)]) -> Vec<f64> {
    pixels
        .iter()
        .flat_map(|&(r, c)| [(c as f64 + 0.5) / camera.width as f64, (r as f64 + 0.5) / camera.height as f64])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TorsoFrame {
    pub rgb: Vec<f32>,
    pub alpha: Vec<f32>,
    /// Field evaluations spent on the image.
    pub queries: u64,
}

/// Evaluates the torso once at every pixel.
pub fn render_torso(
    torso: &TorsoModel,
    params: &ParamStore<f32>,
    camera: &Camera,
    pose: &Pose,
    embedding: usize,
) -> Result<TorsoFrame, Error> {
    let pixels = crate::render::all_pixels(camera);
    let parts: Result<Vec<TorsoFrame>, Error> = pixels
        .par_chunks(1024)
        .map(|chunk| {
            let mut tape = Tape::inference(params);
            let coords = pixel_coords(camera, chunk).into_iter().map(|v| v as f32).collect();
            let x = tape.constant(coords, chunk.len(), 2)?;
            let out = torso.query(&mut tape, x, pose, embedding)?;
            Ok(TorsoFrame {
                rgb: tape.value(out.rgb).to_vec(),
                alpha: tape.value(out.alpha).to_vec(),
                queries: tape.stats().field_queries,
            })
        })
        .collect();
    let mut frame = TorsoFrame { rgb: Vec::new(), alpha: Vec::new(), queries: 0 };
    for p in parts? {
        frame.rgb.extend(p.rgb);
        frame.alpha.extend(p.alpha);
        frame.queries += p.queries;
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (TorsoModel, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = TorsoConfig { grid: GridConfig { levels: 6, max_resolution: 128, ..GridConfig::default() }, ..TorsoConfig::default() };
        let m = TorsoModel::new(cfg, 4, &mut store, &mut rng);
        (m, store)
    }

    #[test]
    fn zero_initialized_deformation() {
        let (m, store) = model();
        let mut tape = Tape::inference(&store);
        let x = tape.constant((0..40).map(|i| (i as f32 * 0.137) % 1.0).collect(), 20, 2).unwrap();
        let pose = Pose::from_rt([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], [0.3, 0.1, 2.0]);
        let out = m.query(&mut tape, x, &pose, 1).unwrap();
        assert!(tape.value(out.offset).iter().all(|&v| v == 0.0));
        assert!(tape.value(out.rgb).iter().chain(tape.value(out.alpha)).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn one_evaluation_per_pixel() {
        let (m, store) = model();
        let cam = Camera { width: 37, height: 23, fx: 50.0, fy: 50.0, cx: 18.5, cy: 11.5 };
        let f = render_torso(&m, &store, &cam, &Pose::identity(), 0).unwrap();
        assert_eq!(f.queries, 37 * 23);
        assert_eq!(f.alpha.len(), 37 * 23);
    }
}
