//! Pinhole rays in canonical head space, occupancy-pruned stratified
//! sampling, emission-absorption quadrature and layer compositing.

use rayon::prelude::*;

use crate::autograd::{lit, to_f64, BackwardCtx, CustomOp, ParamStore, Real, Tape, TensorError, Var};
use crate::head::{HeadCond, HeadModel};
use crate::occupancy::OccupancyGrid;
use crate::Error;

pub const DEFAULT_CANDIDATES: usize = 128;
pub const DEFAULT_MAX_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Rigid head-to-camera transform, row-major 4×4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub matrix: [f64; 16],
}

impl Pose {
    pub fn identity() -> Self {
        Self::from_rt([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3])
    }

    pub fn from_rt(r: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut m = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 4 + j] = r[i][j];
            }
            m[i * 4 + 3] = t[i];
        }
        m[15] = 1.0;
        Self { matrix: m }
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.matrix[3], self.matrix[7], self.matrix[11]]
    }

    /// `max |R·Rᵀ − I|` over entries.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                err = err.max((d - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        err
    }

    pub fn determinant(&self) -> f64 {
        let r = self.rotation();
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Camera-space point to head space: `Rᵀ(p − t)`.
    pub fn to_head(&self, p: [f64; 3]) -> [f64; 3] {
        let t = self.translation();
        self.dir_to_head([p[0] - t[0], p[1] - t[1], p[2] - t[2]])
    }

    pub fn dir_to_head(&self, d: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Head-space point to camera space: `R·p + t`.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i])
    }

    /// Flattened rotation followed by translation.
    pub fn code(&self) -> [f64; 12] {
        let r = self.rotation();
        let t = self.translation();
        let mut c = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                c[i * 3 + j] = r[i][j];
            }
            c[9 + i] = t[i];
        }
        c
    }
}

impl Camera {
    /// Projects a camera-space point to continuous pixel coordinates `(x, y)`.
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
    /// False when the ray misses the unit cube.
    pub hit: bool,
    /// `(row, col)`.
    pub pixel: (usize, usize),
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|k| self.origin[k] + t * self.dir[k])
    }
}

/// Slab test against `[0,1]³`; the near distance is clipped at zero.
pub fn intersect_unit_cube(o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let mut tn = f64::NEG_INFINITY;
    let mut tf = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k] < 0.0 || o[k] > 1.0 {
                return None;
            }
            continue;
        }
        let a = (0.0 - o[k]) / d[k];
        let b = (1.0 - o[k]) / d[k];
        tn = tn.max(a.min(b));
        tf = tf.min(a.max(b));
    }
    let tn = tn.max(0.0);
    (tn < tf).then_some((tn, tf))
}

/// Ray through continuous pixel coordinates `(px, py)`.
pub fn ray_through(camera: &Camera, pose: &Pose, px: f64, py: f64, pixel: (usize, usize)) -> Ray {
    let d = [(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, 1.0];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let d_cam = d.map(|v| v / n);
    let origin = pose.to_head([0.0; 3]);
    let dir = pose.dir_to_head(d_cam);
    match intersect_unit_cube(origin, dir) {
        Some((t_near, t_far)) => Ray { origin, dir, t_near, t_far, hit: true, pixel },
        None => Ray { origin, dir, t_near: 0.0, t_far: 0.0, hit: false, pixel },
    }
}

/// Rays through pixel centres.
pub fn generate_rays(camera: &Camera, pose: &Pose, pixels: &[(usize, usize)]) -> Vec<Ray> {
    pixels
        .iter()
        .map(|&(r, c)| ray_through(camera, pose, c as f64 + 0.5, r as f64 + 0.5, (r, c)))
        .collect()
}

pub fn all_pixels(camera: &Camera) -> Vec<(usize, usize)> {
    (0..camera.height).flat_map(|r| (0..camera.width).map(move |c| (r, c))).collect()
}

/// How candidates along a ray become samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Stratified candidates; the first `max_samples` in occupied voxels are kept.
    Pruned { candidates: usize, max_samples: usize },
    /// Every stratified candidate is kept.
    Dense { candidates: usize },
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Pruned { candidates: DEFAULT_CANDIDATES, max_samples: DEFAULT_MAX_SAMPLES }
    }
}

/// Flattened samples of a ray batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    /// `[S, 3]` canonical positions.
    pub positions: Vec<f64>,
    pub deltas: Vec<f64>,
    /// Ray `r` owns samples `offsets[r]..offsets[r + 1]`.
    pub offsets: Vec<usize>,
}

impl SampleBatch {
    pub fn num_rays(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_samples(&self) -> usize {
        self.deltas.len()
    }
}

/// Stratified candidates `t_j = t_near + (j + u)·Δ` with per-ray offset
/// `u = jitter[r]` (0.5 gives strata midpoints). A kept sample's step is the
/// distance to the next kept sample or to `t_far`, capped at `Δ`.
/// With `occupancy = None` every voxel counts as occupied.
pub fn sample_rays(rays: &[Ray], sampling: Sampling, occupancy: Option<&OccupancyGrid>, jitter: &[f64]) -> SampleBatch {
    assert_eq!(jitter.len(), rays.len(), "one jitter offset per ray");
    let (candidates, cap, prune) = match sampling {
        Sampling::Pruned { candidates, max_samples } => (candidates, max_samples, true),
        Sampling::Dense { candidates } => (candidates, candidates, false),
    };
    let mut batch = SampleBatch { offsets: vec![0], ..SampleBatch::default() };
    let mut kept: Vec<f64> = Vec::with_capacity(cap);
    for (ray, &u) in rays.iter().zip(jitter) {
        kept.clear();
        if ray.hit && candidates > 0 {
            let step = (ray.t_far - ray.t_near) / candidates as f64;
            for j in 0..candidates {
                if kept.len() == cap {
                    break;
                }
                let t = ray.t_near + (j as f64 + u) * step;
                if prune {
                    if let Some(g) = occupancy {
                        if !g.is_occupied(ray.at(t)) {
                            continue;
                        }
                    }
                }
                kept.push(t);
            }
            for (i, &t) in kept.iter().enumerate() {
                let next = kept.get(i + 1).copied().unwrap_or(ray.t_far);
                batch.deltas.push((next - t).min(step));
                batch.positions.extend_from_slice(&ray.at(t));
            }
        }
        batch.offsets.push(batch.deltas.len());
    }
    batch
}

/// Per-ray quadrature results.
#[derive(Debug, Clone, Copy)]
pub struct RayOutput {
    /// `[R, 3]`, premultiplied.
    pub color: Var,
    /// `[R, 1]`.
    pub opacity: Var,
    /// `[R, D]`, `0.5 + Σ w_i (x_a,i − 0.5)`.
    pub audio_coord: Var,
}

/// Emission-absorption quadrature over per-sample `σ: [S,1]`, `c: [S,3]`,
/// `x_a: [S,D]`: `α_i = 1 − exp(−σ_i δ_i)`, `w_i = T_i α_i`,
/// `C = Σ w_i c_i`, `O = Σ w_i`.
pub fn volume_render<T: Real>(
    tape: &mut Tape<'_, T>,
    sigma: Var,
    color: Var,
    audio_coord: Var,
    batch: &SampleBatch,
) -> Result<RayOutput, TensorError> {
    let s = batch.num_samples();
    let d = tape.shape(audio_coord).1;
    for (v, cols) in [(sigma, 1), (color, 3), (audio_coord, d)] {
        if tape.shape(v) != (s, cols) {
            return Err(TensorError::ShapeMismatch { op: "volume_render", left: tape.shape(v), right: (s, cols) });
        }
    }
    let width = 4 + d;
    let r = batch.num_rays();
    let deltas: Vec<T> = batch.deltas.iter().map(|&x| lit(x)).collect();
    let mut out = vec![T::zero(); r * width];
    {
        let (sg, cl, xa) = (tape.value(sigma), tape.value(color), tape.value(audio_coord));
        let half: T = lit(0.5);
        for ray in 0..r {
            let o = &mut out[ray * width..(ray + 1) * width];
            let mut trans = T::one();
            for i in batch.offsets[ray]..batch.offsets[ray + 1] {
                let alpha = T::one() - (-sg[i] * deltas[i]).exp();
                let w = trans * alpha;
                for k in 0..3 {
                    o[k] += w * cl[i * 3 + k];
                }
                o[3] += w;
                for k in 0..d {
                    o[4 + k] += w * (xa[i * d + k] - half);
                }
                trans = trans * (T::one() - alpha);
            }
            for k in 0..d {
                o[4 + k] += half;
            }
        }
    }
    let op = VolumeRenderOp { offsets: batch.offsets.clone(), deltas, dim: d };
    let packed = tape.custom(vec![sigma, color, audio_coord], out, r, width, Box::new(op), false)?;
    Ok(RayOutput {
        color: tape.slice_cols(packed, 0, 3)?,
        opacity: tape.slice_cols(packed, 3, 1)?,
        audio_coord: tape.slice_cols(packed, 4, d)?,
    })
}

struct VolumeRenderOp<T> {
    offsets: Vec<usize>,
    deltas: Vec<T>,
    dim: usize,
}

impl<T: Real> CustomOp<T> for VolumeRenderOp<T> {
    fn name(&self) -> &'static str {
        "volume_render"
    }

    // With u_i = gC·c_i + gO + gX·(x_i − ½):
    //   ∂L/∂c_i = w_i gC,  ∂L/∂x_i = w_i gX,
    //   ∂L/∂σ_k = δ_k (T_{k+1} u_k − Σ_{i>k} w_i u_i).
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, g: &[T]) {
        let d = self.dim;
        let width = 4 + d;
        let (sg, cl, xa) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let half: T = lit(0.5);
        let mut trans_after = Vec::new();
        let mut weights = Vec::new();
        let mut us = Vec::new();
        let [gs, gc, gx] = &mut ctx.input_grads[..] else { unreachable!() };
        for ray in 0..self.offsets.len() - 1 {
            let (a, b) = (self.offsets[ray], self.offsets[ray + 1]);
            let gr = &g[ray * width..(ray + 1) * width];
            trans_after.clear();
            weights.clear();
            us.clear();
            let mut trans = T::one();
            for i in a..b {
                let alpha = T::one() - (-sg[i] * self.deltas[i]).exp();
                let w = trans * alpha;
                trans = trans * (T::one() - alpha);
                weights.push(w);
                trans_after.push(trans);
                let mut u = gr[3];
                for k in 0..3 {
                    u += gr[k] * cl[i * 3 + k];
                }
                for k in 0..d {
                    u += gr[4 + k] * (xa[i * d + k] - half);
                }
                us.push(u);
                if let Some(gc) = gc.as_deref_mut() {
                    for k in 0..3 {
                        gc[i * 3 + k] += w * gr[k];
                    }
                }
                if let Some(gx) = gx.as_deref_mut() {
                    for k in 0..d {
                        gx[i * d + k] += w * gr[4 + k];
                    }
                }
            }
            if let Some(gs) = gs.as_deref_mut() {
                let mut suffix = T::zero();
                for j in (0..b - a).rev() {
                    let i = a + j;
                    gs[i] += self.deltas[i] * (trans_after[j] * us[j] - suffix);
                    suffix += weights[j] * us[j];
                }
            }
        }
    }
}

/// Queries the head at every sample of `batch` and integrates.
pub fn render_head<T: Real>(
    tape: &mut Tape<'_, T>,
    head: &HeadModel,
    cond: &HeadCond<T>,
    batch: &SampleBatch,
) -> Result<RayOutput, TensorError> {
    let s = batch.num_samples();
    let d = head.config.audio_dim;
    if s == 0 {
        let r = batch.num_rays();
        let color = tape.constant(vec![T::zero(); r * 3], r, 3)?;
        let opacity = tape.constant(vec![T::zero(); r], r, 1)?;
        let audio_coord = tape.constant(vec![lit(0.5); r * d], r, d)?;
        return Ok(RayOutput { color, opacity, audio_coord });
    }
    let x = tape.constant(batch.positions.iter().map(|&v| lit(v)).collect(), s, 3)?;
    let q = head.query(tape, x, cond)?;
    volume_render(tape, q.sigma, q.color, q.audio_coord, batch)
}

/// `C + (1 − O)·plate` with a constant `[R, 3]` plate.
pub fn composite_over_plate<T: Real>(
    tape: &mut Tape<'_, T>,
    out: &RayOutput,
    plate: &[T],
) -> Result<Var, TensorError> {
    let r = tape.shape(out.opacity).0;
    let o3 = tape.gather(out.opacity, (0..r as u32).flat_map(|i| [i, i, i]).collect(), r, 3)?;
    let p = tape.constant(plate.to_vec(), r, 3)?;
    let occluded = tape.mul(o3, p)?;
    let sum = tape.add(out.color, p)?;
    tape.sub(sum, occluded)
}

/// Head over torso over background, per pixel.
pub fn composite(
    head_rgb: [f32; 3],
    head_opacity: f32,
    torso_rgb: [f32; 3],
    torso_alpha: f32,
    background: [f32; 3],
) -> [f32; 3] {
    [0, 1, 2].map(|k| {
        let under = torso_rgb[k] * torso_alpha + (1.0 - torso_alpha) * background[k];
        head_rgb[k] + (1.0 - head_opacity) * under
    })
}

/// Frozen-model head render of a whole image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFrame {
    /// `[H·W, 3]` premultiplied.
    pub rgb: Vec<f32>,
    pub opacity: Vec<f32>,
    /// `[H·W, D]`.
    pub audio_coord: Vec<f32>,
    pub samples: usize,
}

/// Condition for an inference render.
#[derive(Debug, Clone)]
pub struct FrameCondition {
    pub audio: Vec<f32>,
    pub eye: f32,
    pub embedding: usize,
}

pub const RENDER_CHUNK: usize = 1024;

/// Renders every pixel with strata-midpoint candidates, in parallel chunks
/// over an immutable parameter snapshot.
pub fn render_head_frame(
    head: &HeadModel,
    params: &ParamStore<f32>,
    occupancy: Option<&OccupancyGrid>,
    camera: &Camera,
    pose: &Pose,
    cond: &FrameCondition,
    sampling: Sampling,
) -> Result<HeadFrame, Error> {
    let pixels = all_pixels(camera);
    render_head_pixels(head, params, occupancy, camera, pose, cond, sampling, &pixels)
}

#[allow(clippy::too_many_arguments)]
pub fn render_head_pixels(
    head: &HeadModel,
    params: &ParamStore<f32>,
    occupancy: Option<&OccupancyGrid>,
    camera: &Camera,
    pose: &Pose,
    cond: &FrameCondition,
    sampling: Sampling,
    pixels: &[(usize, usize)],
) -> Result<HeadFrame, Error> {
    let d = head.config.audio_dim;
    let parts: Result<Vec<HeadFrame>, Error> = pixels
        .par_chunks(RENDER_CHUNK)
        .map(|chunk| {
            let rays = generate_rays(camera, pose, chunk);
            let batch = sample_rays(&rays, sampling, occupancy, &vec![0.5; rays.len()]);
            let mut tape = Tape::inference(params);
            let audio = tape.constant(cond.audio.clone(), 1, cond.audio.len())?;
            let hc = HeadCond { audio, eye: cond.eye, embedding: cond.embedding };
            let out = render_head(&mut tape, head, &hc, &batch)?;
            Ok(HeadFrame {
                rgb: tape.value(out.color).to_vec(),
                opacity: tape.value(out.opacity).to_vec(),
                audio_coord: tape.value(out.audio_coord).to_vec(),
                samples: batch.num_samples(),
            })
        })
        .collect();
    let parts = parts?;
    let mut frame = HeadFrame {
        rgb: Vec::with_capacity(pixels.len() * 3),
        opacity: Vec::with_capacity(pixels.len()),
        audio_coord: Vec::with_capacity(pixels.len() * d),
        samples: 0,
    };
    for p in parts {
        frame.rgb.extend(p.rgb);
        frame.opacity.extend(p.opacity);
        frame.audio_coord.extend(p.audio_coord);
        frame.samples += p.samples;
    }
    Ok(frame)
}

/// Scalar quadrature in `f64` over explicit per-sample values, used by
/// oracles and tests: returns `(C, O)`.
pub fn quadrature(sigma: &[f64], delta: &[f64], color: &[[f64; 3]]) -> ([f64; 3], f64) {
    let mut c = [0.0; 3];
    let mut trans = 1.0;
    for i in 0..sigma.len() {
        let alpha = 1.0 - (-sigma[i] * delta[i]).exp();
        let w = trans * alpha;
        for k in 0..3 {
            c[k] += w * color[i][k];
        }
        trans *= 1.0 - alpha;
    }
    (c, 1.0 - trans)
}

pub fn to_f64_vec<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|&x| to_f64(x)).collect()
}
