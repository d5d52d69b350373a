//! Multiresolution hash-grid feature encoders over `[0,1]^d`, `d ∈ {1,2,3}`.
//!
//! Each level is a lattice with `N_l + 1` vertices per axis. Coarse levels
//! whose vertex count fits the table are indexed directly (row-major, no
//! collisions); finer levels use the XOR-of-primes spatial hash. Features are
//! blended multilinearly and the per-level results concatenated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{lit, BackwardCtx, CustomOp, ParamGroup, ParamId, ParamStore, Real, Tape, TensorError, Var};

/// One odd multiplier per axis.
pub const HASH_PRIMES: [u32; 3] = [2_654_435_761, 805_459_861, 3_674_653_429];

pub const TABLE_INIT_BOUND: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub levels: usize,
    pub channels: usize,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub log2_table_size: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { levels: 16, channels: 2, base_resolution: 16, max_resolution: 2048, log2_table_size: 16 }
    }
}

impl GridConfig {
    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.channels
    }

    /// `N_l = floor(N_min · b^l)` with `b = exp((ln N_max − ln N_min)/(L − 1))`.
    pub fn resolutions(&self) -> Vec<u32> {
        let (lo, hi) = (self.base_resolution as f64, self.max_resolution as f64);
        if self.levels <= 1 {
            return vec![self.base_resolution; self.levels];
        }
        let b = ((hi.ln() - lo.ln()) / (self.levels as f64 - 1.0)).exp();
        // The epsilon keeps exact powers (2048 = 16·b^15) from flooring down.
        (0..self.levels).map(|l| (lo * b.powi(l as i32) + 1e-6).floor() as u32).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLevel {
    pub resolution: u32,
    /// Table rows at this level.
    pub entries: usize,
    pub hashed: bool,
    pub param: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashGridEncoder {
    pub name: String,
    pub input_dim: usize,
    pub config: GridConfig,
    pub levels: Vec<GridLevel>,
}

impl HashGridEncoder {
    pub fn new<T: Real, R: Rng>(
        name: &str,
        input_dim: usize,
        config: GridConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        assert!((1..=3).contains(&input_dim), "grid input dimension must be 1, 2 or 3");
        let table = config.table_size();
        let levels = config
            .resolutions()
            .into_iter()
            .enumerate()
            .map(|(l, resolution)| {
                let dense = (resolution as u64 + 1).pow(input_dim as u32);
                let hashed = dense > table as u64;
                let entries = if hashed { table } else { dense as usize };
                let param = store.add_uniform(
                    format!("{name}.level{l:02}"),
                    entries,
                    config.channels,
                    ParamGroup::Grid,
                    TABLE_INIT_BOUND,
                    rng,
                );
                GridLevel { resolution, entries, hashed, param }
            })
            .collect();
        Self { name: name.to_string(), input_dim, config, levels }
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.levels.iter().map(|l| l.param).collect()
    }

    /// Corner reads per sample per level.
    pub fn corners_per_level(&self) -> usize {
        1 << self.input_dim
    }

    /// Encodes one point without a tape.
    pub fn encode_point<T: Real>(&self, params: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let c = self.config.channels;
        let mut out = vec![T::zero(); self.output_dim()];
        for (l, level) in self.levels.iter().enumerate() {
            let table = params.value(level.param);
            for_each_corner(level, self.input_dim, x, |idx, w, _| {
                for ch in 0..c {
                    out[l * c + ch] += w * table[idx * c + ch];
                }
            });
        }
        out
    }

    /// Table rows and interpolation weights touched by `x` at `level`.
    pub fn corners<T: Real>(&self, level: usize, x: &[T]) -> Vec<(usize, T)> {
        let mut v = Vec::new();
        for_each_corner(&self.levels[level], self.input_dim, x, |idx, w, _| v.push((idx, w)));
        v
    }

    /// Encodes a `[n, d]` batch of coordinates as a `[n, L·C]` tape node.
    /// Table gradients flow into the level parameters and, when `coords`
    /// needs a gradient, the exact derivative of the blend flows into it.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, coords: Var) -> Result<Var, TensorError> {
        let (n, d) = tape.shape(coords);
        if d != self.input_dim {
            return Err(TensorError::ShapeMismatch { op: "grid encode", left: (n, d), right: (n, self.input_dim) });
        }
        let c = self.config.channels;
        let width = self.output_dim();
        let params = tape.params();
        let mut out = vec![T::zero(); n * width];
        {
            let x = tape.value(coords);
            match d {
                1 => encode_levels::<T, 1>(&self.levels, params, x, c, &mut out),
                2 => encode_levels::<T, 2>(&self.levels, params, x, c, &mut out),
                _ => encode_levels::<T, 3>(&self.levels, params, x, c, &mut out),
            }
        }
        let fetches = (n * self.levels.len() * (1 << d)) as u64;
        let stats = tape.stats_mut();
        stats.corner_fetches += fetches;
        stats.encoded_sample_levels += (n * self.levels.len()) as u64;
        let op = GridEncodeOp { levels: self.levels.clone(), input_dim: d, channels: c };
        let record = tape.is_recording();
        tape.custom(vec![coords], out, n, width, Box::new(op), record)
    }
}

struct GridEncodeOp {
    levels: Vec<GridLevel>,
    input_dim: usize,
    channels: usize,
}

impl<T: Real> CustomOp<T> for GridEncodeOp {
    fn name(&self) -> &'static str {
        "grid_encode"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, out_grad: &[T]) {
        match self.input_dim {
            1 => self.backward_d::<T, 1>(ctx, out_grad),
            2 => self.backward_d::<T, 2>(ctx, out_grad),
            _ => self.backward_d::<T, 3>(ctx, out_grad),
        }
    }
}

impl GridEncodeOp {
    fn backward_d<T: Real, const D: usize>(&self, ctx: &mut BackwardCtx<'_, T>, out_grad: &[T]) {
        let c = self.channels;
        let width = self.levels.len() * c;
        let x = ctx.inputs[0];
        let n = x.len() / D;
        let mut idx = [0usize; 8];
        let mut w = [T::zero(); 8];
        let mut dw = [[T::zero(); 3]; 8];
        for (l, level) in self.levels.iter().enumerate() {
            let table = ctx.params.value(level.param);
            let scale: T = lit(level.resolution as f64);
            let tgrad = ctx.param_grads.slot(level.param, level.entries * c);
            let mut xgrad = ctx.input_grads[0].as_deref_mut();
            for s in 0..n {
                let g = &out_grad[s * width + l * c..s * width + (l + 1) * c];
                let xs = &x[s * D..(s + 1) * D];
                match xgrad.as_deref_mut() {
                    None => {
                        corners_d::<T, D, false>(level, xs, &mut idx, &mut w, &mut dw);
                        for k in 0..1 << D {
                            let t = &mut tgrad[idx[k] * c..(idx[k] + 1) * c];
                            for ch in 0..c {
                                t[ch] += w[k] * g[ch];
                            }
                        }
                    }
                    Some(xg) => {
                        corners_d::<T, D, true>(level, xs, &mut idx, &mut w, &mut dw);
                        let mut dx = [T::zero(); 3];
                        for k in 0..1 << D {
                            let row = &table[idx[k] * c..(idx[k] + 1) * c];
                            let t = &mut tgrad[idx[k] * c..(idx[k] + 1) * c];
                            let mut gv = T::zero();
                            for ch in 0..c {
                                t[ch] += w[k] * g[ch];
                                gv += g[ch] * row[ch];
                            }
                            for a in 0..D {
                                dx[a] += dw[k][a] * gv;
                            }
                        }
                        for a in 0..D {
                            if xs[a] >= T::zero() && xs[a] <= T::one() {
                                xg[s * D + a] += dx[a] * scale;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn encode_levels<T: Real, const D: usize>(levels: &[GridLevel], params: &ParamStore<T>, x: &[T], c: usize, out: &mut [T]) {
    let n = x.len() / D;
    let width = levels.len() * c;
    let mut idx = [0usize; 8];
    let mut w = [T::zero(); 8];
    let mut dw = [[T::zero(); 3]; 8];
    for (l, level) in levels.iter().enumerate() {
        let table = params.value(level.param);
        for s in 0..n {
            corners_d::<T, D, false>(level, &x[s * D..(s + 1) * D], &mut idx, &mut w, &mut dw);
            let o = &mut out[s * width + l * c..s * width + (l + 1) * c];
            for k in 0..1 << D {
                let row = &table[idx[k] * c..(idx[k] + 1) * c];
                for ch in 0..c {
                    o[ch] += w[k] * row[ch];
                }
            }
        }
    }
}

/// Rows, weights and (when `GRAD`) weight derivatives of the `2^D` corners,
/// with corner bit `k` selecting the upper vertex on axis `k`.
#[inline(always)]
fn corners_d<T: Real, const D: usize, const GRAD: bool>(
    level: &GridLevel,
    x: &[T],
    idx: &mut [usize; 8],
    w: &mut [T; 8],
    dw: &mut [[T; 3]; 8],
) {
    let res = level.resolution;
    let mut term = [[0usize; 2]; 3];
    let mut fac = [[T::zero(); 2]; 3];
    let mut stride = 1usize;
    for k in 0..D {
        let xk = x[k].max(T::zero()).min(T::one());
        let (ci, fr) = cell_of(xk * lit(res as f64), res);
        fac[k] = [T::one() - fr, fr];
        if level.hashed {
            term[k] = [ci.wrapping_mul(HASH_PRIMES[k]) as usize, (ci + 1).wrapping_mul(HASH_PRIMES[k]) as usize];
        } else {
            term[k] = [ci as usize * stride, (ci as usize + 1) * stride];
            stride *= res as usize + 1;
        }
    }
    let mask = level.entries - 1;
    for corner in 0..1 << D {
        let mut h = 0usize;
        let mut wk = T::one();
        for k in 0..D {
            let b = corner >> k & 1;
            if level.hashed {
                h ^= term[k][b];
            } else {
                h += term[k][b];
            }
            wk *= fac[k][b];
        }
        idx[corner] = if level.hashed { h & mask } else { h };
        w[corner] = wk;
        if GRAD {
            for a in 0..D {
                let mut p = if corner >> a & 1 == 1 { T::one() } else { -T::one() };
                for k in 0..D {
                    if k != a {
                        p *= fac[k][corner >> k & 1];
                    }
                }
                dw[corner][a] = p;
            }
        }
    }
}

/// Cell containing `p` on a lattice with `res` cells per axis. Interior
/// vertices belong to the lower cell, so gradients on cell faces are
/// deterministic.
#[inline]
fn cell_of<T: Real>(p: T, res: u32) -> (u32, T) {
    // `p ≥ 0`, so truncation is floor.
    let mut cell = p.to_u32().unwrap_or(0);
    if lit::<T>(cell as f64) == p && cell > 0 {
        cell -= 1;
    }
    let cell = cell.min(res - 1);
    (cell, p - lit(cell as f64))
}

#[inline]
fn table_index(level: &GridLevel, d: usize, v: [u32; 3]) -> usize {
    if level.hashed {
        let mut h = 0u32;
        for k in 0..d {
            h ^= v[k].wrapping_mul(HASH_PRIMES[k]);
        }
        (h as usize) & (level.entries - 1)
    } else {
        let stride = level.resolution as usize + 1;
        let mut idx = 0usize;
        let mut mul = 1usize;
        for &vk in v.iter().take(d) {
            idx += vk as usize * mul;
            mul *= stride;
        }
        idx
    }
}

/// Calls `f(table_row, weight, ∂weight/∂frac)` for each of the `2^d` corners.
#[inline]
fn for_each_corner<T: Real>(level: &GridLevel, d: usize, x: &[T], mut f: impl FnMut(usize, T, [T; 3])) {
    let res = level.resolution;
    let mut cell = [0u32; 3];
    let mut frac = [T::zero(); 3];
    for k in 0..d {
        let xk = x[k].max(T::zero()).min(T::one());
        let (ci, fr) = cell_of(xk * lit(res as f64), res);
        cell[k] = ci;
        frac[k] = fr;
    }
    for corner in 0..(1usize << d) {
        let mut v = [0u32; 3];
        let mut factors = [T::one(); 3];
        let mut signs = [T::one(); 3];
        for k in 0..d {
            if corner >> k & 1 == 1 {
                v[k] = cell[k] + 1;
                factors[k] = frac[k];
            } else {
                v[k] = cell[k];
                factors[k] = T::one() - frac[k];
                signs[k] = -T::one();
            }
        }
        let mut w = T::one();
        for fk in factors.iter().take(d) {
            w *= *fk;
        }
        let mut dw = [T::zero(); 3];
        for k in 0..d {
            let mut p = signs[k];
            for (j, fj) in factors.iter().enumerate().take(d) {
                if j != k {
                    p *= *fj;
                }
            }
            dw[k] = p;
        }
        f(table_index(level, d, v), w, dw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(d: usize, cfg: GridConfig) -> (HashGridEncoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = HashGridEncoder::new("g", d, cfg, &mut store, &mut rng);
        (enc, store)
    }

    #[test]
    fn resolution_schedule() {
        let r = GridConfig::default().resolutions();
        assert_eq!(r.len(), 16);
        assert_eq!(r[0], 16);
        assert_eq!(r[15], 2048);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn feature_dimension_is_32_for_every_input_dim() {
        for d in 1..=3 {
            let (enc, _) = encoder(d, GridConfig::default());
            assert_eq!(enc.output_dim(), 32);
        }
    }

    #[test]
    fn coarse_levels_are_direct() {
        let (enc, _) = encoder(3, GridConfig::default());
        assert!(!enc.levels[0].hashed);
        assert_eq!(enc.levels[0].entries, 17 * 17 * 17);
        assert!(enc.levels[15].hashed);
        assert_eq!(enc.levels[15].entries, 1 << 16);
        let (enc1, _) = encoder(1, GridConfig::default());
        assert!(enc1.levels.iter().all(|l| !l.hashed));
    }

    #[test]
    fn constant_table_gives_constant_output() {
        let (enc, mut store) = encoder(3, GridConfig::default());
        for id in enc.param_ids() {
            store.value_mut(id).fill(0.7);
        }
        for x in [[0.0, 0.0, 0.0], [0.3, 0.91, 0.5], [1.0, 1.0, 0.2]] {
            let f = enc.encode_point(&store, &x);
            assert!(f.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn vertex_query_returns_stored_feature() {
        let (enc, store) = encoder(3, GridConfig::default());
        // Level 0 has 16 cells; vertex (4, 8, 12) sits at x = (0.25, 0.5, 0.75).
        let x = [0.25, 0.5, 0.75];
        let f = enc.encode_point(&store, &x);
        let idx = 4 + 8 * 17 + 12 * 17 * 17;
        let table = store.value(enc.levels[0].param);
        assert_eq!(f[0], table[idx * 2]);
        assert_eq!(f[1], table[idx * 2 + 1]);
    }

    #[test]
    fn cell_midpoint_is_corner_mean() {
        let (enc, store) = encoder(3, GridConfig::default());
        let x = [2.5 / 16.0, 7.5 / 16.0, 11.5 / 16.0];
        let f = enc.encode_point(&store, &x);
        let table = store.value(enc.levels[0].param);
        let mut mean = [0.0; 2];
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = (2 + dx) + (7 + dy) * 17 + (11 + dz) * 17 * 17;
                    mean[0] += table[idx * 2] / 8.0;
                    mean[1] += table[idx * 2 + 1] / 8.0;
                }
            }
        }
        assert!((f[0] - mean[0]).abs() < 1e-15 && (f[1] - mean[1]).abs() < 1e-15);
    }

    #[test]
    fn corner_fetch_counts() {
        for (d, want) in [(3, 8u64), (2, 4)] {
            let cfg = GridConfig { levels: 1, ..GridConfig::default() };
            let (enc, store) = encoder(d, cfg);
            let mut tape = Tape::inference(&store);
            let x = tape.constant(vec![0.3; d], 1, d).unwrap();
            enc.encode(&mut tape, x).unwrap();
            assert_eq!(tape.stats().corner_fetches, want);
            assert_eq!(tape.stats().encoded_sample_levels, 1);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (enc, store) = encoder(2, GridConfig::default());
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.3, 0.6], 1, 2).unwrap();
        let f = enc.encode(&mut tape, x).unwrap();
        let z = tape.scale(f, 0.0);
        let loss = tape.sum(z);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
        for id in enc.param_ids() {
            assert!(tape.param_grads().get(id).unwrap().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn constant_table_has_flat_coordinate_gradient() {
        let (enc, mut store) = encoder(3, GridConfig::default());
        for id in enc.param_ids() {
            store.value_mut(id).fill(-0.4);
        }
        let mut tape = Tape::new(&store);
        let x = tape.input(vec![0.11, 0.52, 0.93], 1, 3).unwrap();
        let f = enc.encode(&mut tape, x).unwrap();
        let loss = tape.sum(f);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn coordinate_gradient_matches_finite_differences_inside_a_cell() {
        let cfg = GridConfig { levels: 4, max_resolution: 64, ..GridConfig::default() };
        let (enc, mut store) = encoder(3, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for id in enc.param_ids() {
            for v in store.value_mut(id) {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let weights: Vec<f64> = (0..enc.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |x: &[f64]| -> f64 {
            enc.encode_point(&store, x).iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut checked = 0;
        while checked < 50 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..0.99)).collect();
            // Skip points within h of any cell face at the finest level.
            let h = 1e-6;
            let near_face = enc.levels.iter().any(|l| {
                x.iter().any(|&xk| {
                    let p = xk * l.resolution as f64;
                    (p - p.round()).abs() < 2.0 * h * l.resolution as f64
                })
            });
            if near_face {
                continue;
            }
            let mut tape = Tape::new(&store);
            let xv = tape.input(x.clone(), 1, 3).unwrap();
            let f = enc.encode(&mut tape, xv).unwrap();
            let w = tape.constant(weights.clone(), enc.output_dim(), 1).unwrap();
            let y = tape.matmul(f, w).unwrap();
            tape.backward(y).unwrap();
            let g = tape.grad(xv).unwrap();
            for k in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
                assert!(rel < 1e-3, "k={k} fd={fd} analytic={}", g[k]);
            }
            checked += 1;
        }
    }

    #[test]
    fn table_gradient_distributes_by_weights() {
        let cfg = GridConfig { levels: 1, ..GridConfig::default() };
        let (enc, store) = encoder(2, cfg);
        let x = [0.37, 0.81];
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.to_vec(), 1, 2).unwrap();
        let f = enc.encode(&mut tape, xv).unwrap();
        let ch0 = tape.slice_cols(f, 0, 1).unwrap();
        tape.backward(ch0).unwrap();
        let grad = tape.param_grads().get(enc.levels[0].param).unwrap();
        for (idx, w) in enc.corners(0, &x) {
            assert!((grad[idx * 2] - w).abs() < 1e-15);
            assert_eq!(grad[idx * 2 + 1], 0.0);
        }
    }

    #[test]
    fn batched_encode_matches_pointwise() {
        for d in 1..=3 {
            let (enc, store) = encoder(d, GridConfig { levels: 6, max_resolution: 512, log2_table_size: 10, ..GridConfig::default() });
            let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
            let xs: Vec<f64> = (0..40 * d).map(|_| rng.random_range(-0.1..1.1)).collect();
            let mut tape = Tape::inference(&store);
            let xv = tape.constant(xs.clone(), 40, d).unwrap();
            let f = enc.encode(&mut tape, xv).unwrap();
            let got = tape.value(f);
            for s in 0..40 {
                let want = enc.encode_point(&store, &xs[s * d..(s + 1) * d]);
                let row = &got[s * enc.output_dim()..(s + 1) * enc.output_dim()];
                assert!(row.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15));
            }
        }
    }

    proptest! {
        #[test]
        fn weights_partition_unity_and_indices_in_range(
            d in 1usize..=3,
            xs in proptest::collection::vec(-0.2f64..1.2, 3),
        ) {
            let (enc, _) = encoder(d, GridConfig::default());
            for (l, level) in enc.levels.iter().enumerate() {
                let corners = enc.corners(l, &xs[..d]);
                prop_assert_eq!(corners.len(), 1 << d);
                let s: f64 = corners.iter().map(|c| c.1).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(corners.iter().all(|c| c.0 < level.entries && c.1 >= -1e-12));
            }
        }

        #[test]
        fn encoding_is_deterministic(x in proptest::collection::vec(0.0f64..1.0, 3)) {
            let (enc, store) = encoder(3, GridConfig::default());
            let a = enc.encode_point(&store, &x);
            let b = enc.encode_point(&store, &x);
            prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
