//! Finite-difference gradient suite in `f64`.
//!
//! Every case builds a graph from `input` leaves and parameters, reduces the
//! output against fixed pseudo-random weights, and compares the analytic
//! gradient of that scalar with central differences at `h = 1e-4`. A case
//! whose differences at `h` and `h/2` disagree sits on a kink (ReLU, clamp,
//! grid cell face) and is redrawn.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioConfig, AudioEncoder, LogitsTrack};
use crate::autograd::{ParamId, ParamStore, Tape, Var, GATHER_ZERO};
use crate::grid::{GridConfig, HashGridEncoder};
use crate::head::{HeadConfig, HeadCond, HeadModel};
use crate::losses;
use crate::render::{composite_over_plate, render_head, sample_rays, volume_render, Ray, SampleBatch, Sampling};
use crate::torso::{TorsoConfig, TorsoModel};
use crate::Error;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const ABS_FLOOR: f64 = 1e-5;
pub const DEFAULT_CASES: usize = 100;
/// Redraws allowed per op before it is reported as failing.
const MAX_REDRAWS_PER_CASE: usize = 2;
/// Parameter elements checked per tensor.
const ELEMENTS_PER_PARAM: usize = 4;

type Build = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, Error>>;

/// One random instance of an op.
pub struct Problem {
    pub store: ParamStore<f64>,
    pub inputs: Vec<(Vec<f64>, usize, usize)>,
    /// Parameters whose gradients are checked.
    pub params: Vec<ParamId>,
    pub build: Build,
}

impl Problem {
    fn new(inputs: Vec<(Vec<f64>, usize, usize)>, build: Build) -> Self {
        Self { store: ParamStore::new(), inputs, params: Vec::new(), build }
    }
}

type Maker = fn(&mut ChaCha8Rng) -> Problem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpResult {
    pub op: String,
    pub cases: usize,
    pub redraws: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub ops: Vec<OpResult>,
    pub seconds: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<22} {:>6} {:>8} {:>8} {:>12}  result\n", "op", "cases", "redraws", "checked", "max rel err");
        for r in &self.ops {
            s += &format!(
                "{:<22} {:>6} {:>8} {:>8} {:>12.3e}  {}\n",
                r.op,
                r.cases,
                r.redraws,
                r.checked,
                r.max_rel_error,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        s += &format!("{} ops in {:.1}s\n", self.ops.len(), self.seconds);
        s
    }
}

/// Fixed reduction weights, in `[-1, 1)`.
fn weight(i: usize) -> f64 {
    ((i as f64 * 0.618_033_988_75 + 0.137).fract()) * 2.0 - 1.0
}

fn output(p: &Problem, store: &ParamStore<f64>, inputs: &[(Vec<f64>, usize, usize)]) -> Result<Vec<f64>, Error> {
    let mut tape = Tape::inference(store);
    let vars: Vec<Var> = inputs.iter().map(|(v, r, c)| tape.input(v.clone(), *r, *c)).collect::<Result<_, _>>()?;
    let out = (p.build)(&mut tape, &vars)?;
    Ok(tape.value(out).to_vec())
}

/// Analytic gradients: one vector per input, then one per checked param.
fn analytic(p: &Problem) -> Result<Vec<Vec<f64>>, Error> {
    let mut tape = Tape::new(&p.store);
    let vars: Vec<Var> = p.inputs.iter().map(|(v, r, c)| tape.input(v.clone(), *r, *c)).collect::<Result<_, _>>()?;
    let out = (p.build)(&mut tape, &vars)?;
    let (r, c) = tape.shape(out);
    let w = tape.constant((0..r * c).map(weight).collect(), r, c)?;
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let mut g: Vec<Vec<f64>> =
        vars.iter().zip(&p.inputs).map(|(&v, (x, _, _))| tape.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.len()])).collect();
    for &id in &p.params {
        let n = p.store.value(id).len();
        g.push(tape.param_grads().get(id).map(<[f64]>::to_vec).unwrap_or(vec![0.0; n]));
    }
    Ok(g)
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

enum Outcome {
    Checked { max: f64, count: usize },
    Kink,
}

fn check_case<R: Rng>(p: &mut Problem, rng: &mut R) -> Result<Outcome, Error> {
    let grads = analytic(p)?;
    let n_in = p.inputs.len();
    // Every input element, and a few elements of each parameter, preferring
    // those the analytic gradient touches.
    let mut targets: Vec<(usize, usize)> = Vec::new();
    for (k, (x, _, _)) in p.inputs.iter().enumerate() {
        targets.extend((0..x.len()).map(|i| (k, i)));
    }
    for j in 0..p.params.len() {
        let g = &grads[n_in + j];
        let nz: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
        for _ in 0..ELEMENTS_PER_PARAM.min(g.len()) {
            let i = if !nz.is_empty() && rng.random::<f64>() < 0.75 { nz[rng.random_range(0..nz.len())] } else { rng.random_range(0..g.len()) };
            targets.push((n_in + j, i));
        }
    }
    let mut max = 0.0f64;
    for &(k, i) in &targets {
        let fd = |p: &mut Problem, h: f64| -> Result<(f64, f64), Error> {
            let eval = |delta: f64, p: &mut Problem| -> Result<Vec<f64>, Error> {
                if k < n_in {
                    let mut inputs = p.inputs.clone();
                    inputs[k].0[i] += delta;
                    output(p, &p.store, &inputs)
                } else {
                    let id = p.params[k - n_in];
                    let orig = p.store.value(id)[i];
                    p.store.value_mut(id)[i] = orig + delta;
                    let v = output(p, &p.store, &p.inputs);
                    p.store.value_mut(id)[i] = orig;
                    v
                }
            };
            // Outputs are differenced before the weighted sum so large
            // unrelated entries do not swamp small derivatives in roundoff.
            let (hi, mid, lo) = (eval(h, p)?, eval(0.0, p)?, eval(-h, p)?);
            let diff = |a: &[f64], b: &[f64], span: f64| {
                a.iter().zip(b).enumerate().map(|(j, (x, y))| weight(j) * (x - y)).sum::<f64>() / span
            };
            Ok((diff(&hi, &lo, 2.0 * h), diff(&hi, &mid, h) - diff(&mid, &lo, h)))
        };
        let (num, gap) = fd(p, STEP)?;
        let err = rel_error(grads[k][i], num);
        if err >= TOLERANCE {
            // On a smooth function the one-sided slope gap halves with h and
            // the central difference barely moves; a kink inside
            // [x − h, x + h] breaks one of the two by a sizeable fraction
            // of the discrepancy.
            let miss = (grads[k][i] - num).abs();
            let (half, gap2) = fd(p, STEP / 2.0)?;
            let moved = (num - half).abs() > 0.1 * miss;
            let unscaled = (gap2 - gap / 2.0).abs() > 0.1 * gap.abs() && gap.abs() > 0.1 * miss;
            if moved || unscaled {
                return Ok(Outcome::Kink);
            }
        }
        max = max.max(err);
    }
    Ok(Outcome::Checked { max, count: targets.len() })
}

pub fn check_op(name: &str, make: Maker, cases: usize, seed: u64) -> Result<OpResult, Error> {
    let salt = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let (mut max, mut redraws, mut checked) = (0.0f64, 0, 0);
    let mut done = 0;
    while done < cases {
        let mut p = make(&mut rng);
        match check_case(&mut p, &mut rng)? {
            Outcome::Checked { max: m, count } => {
                max = max.max(m);
                checked += count;
                done += 1;
            }
            Outcome::Kink => {
                redraws += 1;
                if redraws > MAX_REDRAWS_PER_CASE * cases.max(5) {
                    return Ok(OpResult { op: name.into(), cases: done, redraws, checked, max_rel_error: f64::INFINITY, passed: false });
                }
            }
        }
    }
    Ok(OpResult { op: name.into(), cases: done, redraws, checked, max_rel_error: max, passed: max < TOLERANCE })
}

// ---- domains ----------------------------------------------------------

fn uniform<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform in `[lo, hi)` but at least `margin` from every kink.
fn away<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let x = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() > margin) {
                break x;
            }
        })
        .collect()
}

fn shape<R: Rng>(rng: &mut R) -> (usize, usize) {
    (rng.random_range(1..4), rng.random_range(1..4))
}

fn leaf<R: Rng>(rng: &mut R, r: usize, c: usize) -> (Vec<f64>, usize, usize) {
    (uniform(rng, r * c, -2.0, 2.0), r, c)
}

// ---- primitive ops ----------------------------------------------------

fn unary(rng: &mut ChaCha8Rng, values: fn(&mut ChaCha8Rng, usize) -> Vec<f64>, f: fn(&mut Tape<'_, f64>, Var) -> Var) -> Problem {
    let (r, c) = shape(rng);
    let x = values(rng, r * c);
    Problem::new(vec![(x, r, c)], Box::new(move |t, v| Ok(f(t, v[0]))))
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape<'_, f64>, Var, Var) -> Result<Var, crate::TensorError>) -> Problem {
    let (r, c) = shape(rng);
    Problem::new(vec![leaf(rng, r, c), leaf(rng, r, c)], Box::new(move |t, v| Ok(f(t, v[0], v[1])?)))
}

fn op_matmul(rng: &mut ChaCha8Rng) -> Problem {
    let (m, k) = shape(rng);
    let n = rng.random_range(1..4);
    Problem::new(vec![leaf(rng, m, k), leaf(rng, k, n)], Box::new(|t, v| Ok(t.matmul(v[0], v[1])?)))
}

fn op_linear(rng: &mut ChaCha8Rng) -> Problem {
    let (m, k) = shape(rng);
    let n = rng.random_range(1..4);
    Problem::new(vec![leaf(rng, m, k), leaf(rng, k, n), leaf(rng, 1, n)], Box::new(|t, v| Ok(t.linear(v[0], v[1], Some(v[2]))?)))
}

fn op_add(rng: &mut ChaCha8Rng) -> Problem {
    binary(rng, |t, a, b| t.add(a, b))
}

fn op_sub(rng: &mut ChaCha8Rng) -> Problem {
    binary(rng, |t, a, b| t.sub(a, b))
}

fn op_mul(rng: &mut ChaCha8Rng) -> Problem {
    binary(rng, |t, a, b| t.mul(a, b))
}

fn op_div(rng: &mut ChaCha8Rng) -> Problem {
    let (r, c) = shape(rng);
    let b: Vec<f64> = uniform(rng, r * c, 0.5, 2.0).into_iter().map(|x| if rng.random() { x } else { -x }).collect();
    Problem::new(vec![leaf(rng, r, c), (b, r, c)], Box::new(|t, v| Ok(t.div(v[0], v[1])?)))
}

fn op_add_row(rng: &mut ChaCha8Rng) -> Problem {
    let (r, c) = shape(rng);
    Problem::new(vec![leaf(rng, r, c), leaf(rng, 1, c)], Box::new(|t, v| Ok(t.add_row(v[0], v[1])?)))
}

fn op_scale(rng: &mut ChaCha8Rng) -> Problem {
    let s = rng.random_range(-3.0..3.0);
    let (r, c) = shape(rng);
    Problem::new(vec![leaf(rng, r, c)], Box::new(move |t, v| Ok(t.scale(v[0], s))))
}

fn op_add_scalar(rng: &mut ChaCha8Rng) -> Problem {
    let s = rng.random_range(-3.0..3.0);
    let (r, c) = shape(rng);
    Problem::new(vec![leaf(rng, r, c)], Box::new(move |t, v| Ok(t.add_scalar(v[0], s))))
}

fn op_exp(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| uniform(r, n, -3.0, 3.0), |t, v| t.exp(v))
}

fn op_log(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| uniform(r, n, 0.1, 4.0), |t, v| t.log(v))
}

fn op_sigmoid(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| uniform(r, n, -6.0, 6.0), |t, v| t.sigmoid(v))
}

fn op_relu(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| away(r, n, -2.0, 2.0, &[0.0], 0.01), |t, v| t.relu(v))
}

fn op_leaky_relu(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| away(r, n, -2.0, 2.0, &[0.0], 0.01), |t, v| t.leaky_relu(v, 0.02))
}

fn op_trunc_exp(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| away(r, n, -18.0, 18.0, &[-15.0, 15.0], 0.01), |t, v| t.trunc_exp(v))
}

fn op_abs(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| away(r, n, -2.0, 2.0, &[0.0], 0.01), |t, v| t.abs(v))
}

fn op_square(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| uniform(r, n, -2.0, 2.0), |t, v| t.square(v))
}

fn op_clamp(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| away(r, n, -1.0, 1.0, &[-0.5, 0.5], 0.01), |t, v| t.clamp(v, -0.5, 0.5))
}

fn op_sum(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| uniform(r, n, -2.0, 2.0), |t, v| t.sum(v))
}

fn op_mean(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| uniform(r, n, -2.0, 2.0), |t, v| t.mean(v))
}

fn op_sum_rows(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| uniform(r, n, -2.0, 2.0), |t, v| t.sum_rows(v))
}

fn op_sum_cols(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| uniform(r, n, -2.0, 2.0), |t, v| t.sum_cols(v))
}

fn op_softmax_rows(rng: &mut ChaCha8Rng) -> Problem {
    unary(rng, |r, n| uniform(r, n, -3.0, 3.0), |t, v| t.softmax_rows(v))
}

fn op_concat_cols(rng: &mut ChaCha8Rng) -> Problem {
    let r = rng.random_range(1..4);
    let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
    Problem::new(vec![leaf(rng, r, a), leaf(rng, r, b)], Box::new(|t, v| Ok(t.concat_cols(&[v[0], v[1]])?)))
}

fn op_concat_rows(rng: &mut ChaCha8Rng) -> Problem {
    let c = rng.random_range(1..4);
    let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
    Problem::new(vec![leaf(rng, a, c), leaf(rng, b, c)], Box::new(|t, v| Ok(t.concat_rows(&[v[0], v[1]])?)))
}

fn op_slice_cols(rng: &mut ChaCha8Rng) -> Problem {
    let (r, c) = (rng.random_range(1..4), rng.random_range(2..5));
    let start = rng.random_range(0..c);
    let len = rng.random_range(1..=c - start);
    Problem::new(vec![leaf(rng, r, c)], Box::new(move |t, v| Ok(t.slice_cols(v[0], start, len)?)))
}

fn op_slice_rows(rng: &mut ChaCha8Rng) -> Problem {
    let (r, c) = (rng.random_range(2..5), rng.random_range(1..4));
    let start = rng.random_range(0..r);
    let len = rng.random_range(1..=r - start);
    Problem::new(vec![leaf(rng, r, c)], Box::new(move |t, v| Ok(t.slice_rows(v[0], start, len)?)))
}

fn op_gather(rng: &mut ChaCha8Rng) -> Problem {
    let (r, c) = shape(rng);
    let n = r * c;
    let (or, oc) = shape(rng);
    let index: Vec<u32> =
        (0..or * oc).map(|_| if rng.random::<f64>() < 0.1 { GATHER_ZERO } else { rng.random_range(0..n) as u32 }).collect();
    Problem::new(vec![leaf(rng, r, c)], Box::new(move |t, v| Ok(t.gather(v[0], index.clone(), or, oc)?)))
}

fn op_repeat_row(rng: &mut ChaCha8Rng) -> Problem {
    let c = rng.random_range(1..4);
    let n = rng.random_range(1..5);
    Problem::new(vec![leaf(rng, 1, c)], Box::new(move |t, v| Ok(t.repeat_row(v[0], n)?)))
}

fn op_reshape(rng: &mut ChaCha8Rng) -> Problem {
    let (r, c) = (rng.random_range(1..4), 2);
    Problem::new(vec![leaf(rng, r, c)], Box::new(move |t, v| Ok(t.reshape(v[0], c, r)?)))
}

// ---- custom ops -------------------------------------------------------

/// Every `*.bias` tensor in `±scale`, keeping hidden units off the ReLU
/// kink that zero biases put them on.
fn randomize_biases(store: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.name.ends_with(".bias")).map(|(id, _)| id).collect();
    randomize(store, &ids, scale, rng);
}

fn randomize(store: &mut ParamStore<f64>, ids: &[ParamId], scale: f64, rng: &mut ChaCha8Rng) {
    for &id in ids {
        for v in store.value_mut(id) {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Two dense levels and one hashed level.
fn tiny_grid() -> GridConfig {
    GridConfig { levels: 3, channels: 2, base_resolution: 2, max_resolution: 16, log2_table_size: 6 }
}

fn grid_problem(rng: &mut ChaCha8Rng, dim: usize) -> Problem {
    let mut store = ParamStore::new();
    let enc = HashGridEncoder::new("grid", dim, tiny_grid(), &mut store, rng);
    let ids = enc.param_ids();
    randomize(&mut store, &ids, 1.0, rng);
    let n = rng.random_range(1..4);
    let x = uniform(rng, n * dim, 0.02, 0.98);
    Problem { store, inputs: vec![(x, n, dim)], params: ids, build: Box::new(move |t, v| Ok(enc.encode(t, v[0])?)) }
}

fn op_grid_1d(rng: &mut ChaCha8Rng) -> Problem {
    grid_problem(rng, 1)
}

fn op_grid_2d(rng: &mut ChaCha8Rng) -> Problem {
    grid_problem(rng, 2)
}

fn op_grid_3d(rng: &mut ChaCha8Rng) -> Problem {
    grid_problem(rng, 3)
}

fn random_batch(rng: &mut ChaCha8Rng) -> SampleBatch {
    let rays = rng.random_range(1..4);
    let mut offsets = vec![0];
    for _ in 0..rays {
        let k = rng.random_range(0..5);
        offsets.push(offsets.last().unwrap() + k);
    }
    let s = *offsets.last().unwrap();
    SampleBatch { positions: uniform(rng, s * 3, 0.0, 1.0), deltas: uniform(rng, s, 0.01, 0.3), offsets }
}

fn op_volume_render(rng: &mut ChaCha8Rng) -> Problem {
    let batch = random_batch(rng);
    let s = batch.num_samples().max(1);
    let batch = if batch.num_samples() == 0 {
        SampleBatch { positions: vec![0.5; 3], deltas: vec![0.1], offsets: vec![0, 1] }
    } else {
        batch
    };
    let d = rng.random_range(1..4);
    let inputs = vec![(uniform(rng, s, 0.0, 8.0), s, 1), (uniform(rng, s * 3, 0.0, 1.0), s, 3), (uniform(rng, s * d, 0.0, 1.0), s, d)];
    Problem::new(
        inputs,
        Box::new(move |t, v| {
            let o = volume_render(t, v[0], v[1], v[2], &batch)?;
            Ok(t.concat_cols(&[o.color, o.opacity, o.audio_coord])?)
        }),
    )
}

fn op_color_mse(rng: &mut ChaCha8Rng) -> Problem {
    let n = rng.random_range(1..6);
    let inputs = vec![(uniform(rng, n * 3, 0.0, 1.0), n, 3), (uniform(rng, n * 3, 0.0, 1.0), n, 3)];
    Problem::new(inputs, Box::new(|t, v| Ok(losses::color_mse(t, v[0], v[1])?)))
}

fn op_entropy(rng: &mut ChaCha8Rng) -> Problem {
    let n = rng.random_range(1..6);
    Problem::new(vec![(uniform(rng, n, 0.02, 0.98), n, 1)], Box::new(|t, v| Ok(losses::entropy(t, v[0])?)))
}

fn op_dynamic(rng: &mut ChaCha8Rng) -> Problem {
    let n = rng.random_range(2..6);
    let d = rng.random_range(1..4);
    let rays: Vec<u32> = (0..n as u32).filter(|_| rng.random()).collect();
    let rays = if rays.is_empty() { vec![0] } else { rays };
    Problem::new(
        vec![(away(rng, n * d, 0.0, 1.0, &[0.5], 0.01), n, d)],
        Box::new(move |t, v| Ok(losses::dynamic(t, v[0], &rays)?)),
    )
}

fn op_ssim(rng: &mut ChaCha8Rng) -> Problem {
    let (h, w) = (rng.random_range(7..10), rng.random_range(7..10));
    let n = h * w;
    let inputs = vec![(uniform(rng, n * 3, 0.0, 1.0), n, 3), (uniform(rng, n * 3, 0.0, 1.0), n, 3)];
    Problem::new(inputs, Box::new(move |t, v| Ok(losses::ssim(t, v[0], v[1], h, w)?)))
}

fn tiny_audio() -> AudioConfig {
    AudioConfig { logit_dim: 3, conv_widths: vec![4, 4, 4, 4], code_dim: 6, ..AudioConfig::default() }
}

/// Conv stack, projection and attention over eight windows of logits.
fn op_audio_encoder(rng: &mut ChaCha8Rng) -> Problem {
    let mut store = ParamStore::new();
    let cfg = tiny_audio();
    let enc = AudioEncoder::new(cfg.clone(), &mut store, rng);
    let rows = cfg.attention_window * cfg.window;
    let x = uniform(rng, rows * cfg.logit_dim, -1.0, 1.0);
    let params = enc.param_ids();
    randomize_biases(&mut store, 0.1, rng);
    Problem {
        store,
        inputs: vec![(x, rows, cfg.logit_dim)],
        params,
        build: Box::new(move |t, v| {
            let f = enc.encode_windows(t, v[0])?;
            Ok(enc.attend(t, f)?)
        }),
    }
}

fn op_torso(rng: &mut ChaCha8Rng) -> Problem {
    let mut store = ParamStore::new();
    let cfg = TorsoConfig { hidden: 6, embed_dim: 2, grid: tiny_grid() };
    let torso = TorsoModel::new(cfg, 3, &mut store, rng);
    let ids = torso.param_ids();
    for &id in &torso.grid.param_ids() {
        randomize(&mut store, &[id], 1.0, rng);
    }
    // The deformation head starts at zero; give it a small random value so
    // every parameter receives gradient.
    let deform = store.find("torso.deform_mlp.2.weight").expect("deform layer");
    randomize(&mut store, &[deform], 0.05, rng);
    randomize_biases(&mut store, 0.1, rng);
    let n = rng.random_range(1..4);
    let pose = crate::render::Pose::from_rt(
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 2.0],
    );
    let emb = rng.random_range(0..3);
    Problem {
        store,
        inputs: vec![(uniform(rng, n * 2, 0.1, 0.9), n, 2)],
        params: ids,
        build: Box::new(move |t, v| {
            let o = torso.query(t, v[0], &pose, emb)?;
            Ok(t.concat_cols(&[o.rgb, o.alpha])?)
        }),
    }
}

/// One ray through a toy head whose audio code comes from the encoder:
/// checks every parameter group against the composited pixel.
fn op_head_ray(rng: &mut ChaCha8Rng) -> Problem {
    let mut store = ParamStore::new();
    let acfg = tiny_audio();
    let afe = AudioEncoder::new(acfg.clone(), &mut store, rng);
    let hcfg = HeadConfig {
        audio_dim: rng.random_range(1..4),
        code_dim: acfg.code_dim,
        hidden: 6,
        geo_feat: 3,
        embed_dim: 2,
        grid: tiny_grid(),
    };
    let head = HeadModel::new(hcfg, 3, &mut store, rng);
    randomize(&mut store, &head.spatial.param_ids(), 1.0, rng);
    randomize(&mut store, &head.audio_grid.param_ids(), 1.0, rng);
    randomize_biases(&mut store, 0.1, rng);
    let mut params = afe.param_ids();
    params.extend(head.param_ids());

    let frames = 12;
    let track = LogitsTrack::new(frames, acfg.logit_dim, (0..frames * acfg.logit_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("track shape");
    let frame = rng.random_range(0..frames);
    let ray = Ray {
        origin: [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), -1.0],
        dir: [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 1.0],
        t_near: 1.0,
        t_far: 2.0,
        hit: true,
        pixel: (0, 0),
    };
    let batch = sample_rays(&[ray], Sampling::Dense { candidates: 6 }, None, &[rng.random::<f64>()]);
    let plate = uniform(rng, 3, 0.0, 1.0);
    let eye = rng.random_range(0.0..0.005);
    let embedding = rng.random_range(0..3);
    Problem {
        store,
        inputs: Vec::new(),
        params,
        build: Box::new(move |t, _| {
            let audio = afe.code(t, &track, frame)?;
            let cond = HeadCond { audio, eye, embedding };
            let out = render_head(t, &head, &cond, &batch)?;
            Ok(composite_over_plate(t, &out, &plate)?)
        }),
    }
}

pub fn ops() -> Vec<(&'static str, Maker)> {
    vec![
        ("matmul", op_matmul),
        ("linear", op_linear),
        ("add", op_add),
        ("sub", op_sub),
        ("mul", op_mul),
        ("div", op_div),
        ("add_row", op_add_row),
        ("scale", op_scale),
        ("add_scalar", op_add_scalar),
        ("exp", op_exp),
        ("log", op_log),
        ("sigmoid", op_sigmoid),
        ("relu", op_relu),
        ("leaky_relu", op_leaky_relu),
        ("trunc_exp", op_trunc_exp),
        ("abs", op_abs),
        ("square", op_square),
        ("clamp", op_clamp),
        ("sum", op_sum),
        ("mean", op_mean),
        ("sum_rows", op_sum_rows),
        ("sum_cols", op_sum_cols),
        ("softmax_rows", op_softmax_rows),
        ("concat_cols", op_concat_cols),
        ("concat_rows", op_concat_rows),
        ("slice_cols", op_slice_cols),
        ("slice_rows", op_slice_rows),
        ("gather", op_gather),
        ("repeat_row", op_repeat_row),
        ("reshape", op_reshape),
        ("grid_encode_1d", op_grid_1d),
        ("grid_encode_2d", op_grid_2d),
        ("grid_encode_3d", op_grid_3d),
        ("volume_render", op_volume_render),
        ("color_mse", op_color_mse),
        ("entropy", op_entropy),
        ("dynamic", op_dynamic),
        ("ssim", op_ssim),
        ("audio_encoder", op_audio_encoder),
        ("torso_query", op_torso),
        ("head_ray", op_head_ray),
    ]
}

/// Runs every op with `cases` seeded cases each.
pub fn run(seed: u64, cases: usize) -> Result<GradcheckReport, Error> {
    let t0 = Instant::now();
    let ops = ops()
        .into_iter()
        .map(|(name, make)| check_op(name, make, cases, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let passed = ops.iter().all(|o| o.passed);
    Ok(GradcheckReport { seed, step: STEP, tolerance: TOLERANCE, ops, seconds: t0.elapsed().as_secs_f64(), passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{BackwardCtx, CustomOp};

    /// `x²` forward with `x` as its claimed derivative.
    struct WrongSquare;

    impl CustomOp<f64> for WrongSquare {
        fn name(&self) -> &'static str {
            "wrong_square"
        }

        fn backward(&self, ctx: &mut BackwardCtx<'_, f64>, out_grad: &[f64]) {
            let x = ctx.inputs[0].to_vec();
            if let Some(g) = ctx.input_grads[0].as_mut() {
                for i in 0..g.len() {
                    g[i] += out_grad[i] * x[i];
                }
            }
        }
    }

    fn wrong_square(rng: &mut ChaCha8Rng) -> Problem {
        let x = away(rng, 3, -2.0, 2.0, &[0.0], 0.1);
        Problem::new(
            vec![(x, 1, 3)],
            Box::new(|t, v| {
                let value = t.value(v[0]).iter().map(|x| x * x).collect();
                Ok(t.custom(vec![v[0]], value, 1, 3, Box::new(WrongSquare), false)?)
            }),
        )
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let r = check_op("wrong_square", wrong_square, 10, 1).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn every_op_passes_a_few_cases() {
        for (name, make) in ops() {
            let r = check_op(name, make, 5, 3).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn params_are_perturbed_and_restored() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = op_grid_2d(&mut rng);
        let before = p.store.clone();
        check_case(&mut p, &mut rng).unwrap();
        for id in before.ids() {
            assert_eq!(before.value(id), p.store.value(id));
        }
    }
}
