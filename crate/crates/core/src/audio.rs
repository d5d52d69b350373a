//! Per-frame ASR logits to 64-d audio codes: a strided 1D convolution stack
//! over a 16-frame window, then attention over the trailing 8 frame features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{lit, ParamId, ParamStore, Real, Tape, TensorError, Var, GATHER_ZERO};
use crate::nn::{dense, Layer};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    pub logit_dim: usize,
    pub window: usize,
    pub attention_window: usize,
    pub conv_widths: Vec<usize>,
    pub code_dim: usize,
    pub leaky_slope: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            logit_dim: 29,
            window: 16,
            attention_window: 8,
            conv_widths: vec![32, 32, 64, 64],
            code_dim: 64,
            leaky_slope: 0.02,
        }
    }
}

/// Row-major `[num_frames, logit_dim]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsTrack {
    pub num_frames: usize,
    pub logit_dim: usize,
    pub values: Vec<f32>,
}

impl LogitsTrack {
    pub fn new(num_frames: usize, logit_dim: usize, values: Vec<f32>) -> Result<Self, Error> {
        if num_frames == 0 {
            return Err(Error::Validation("logits track has no frames".into()));
        }
        if values.len() != num_frames * logit_dim {
            return Err(Error::Validation(format!(
                "logits track holds {} values, expected {num_frames}x{logit_dim}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("logit at frame {} is not finite", i / logit_dim)));
        }
        Ok(Self { num_frames, logit_dim, values })
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.logit_dim..(frame + 1) * self.logit_dim]
    }

    /// Rows `[frame − w/2, frame + w/2)`, edge-padded.
    pub fn window(&self, frame: usize, w: usize) -> Result<Vec<f32>, Error> {
        if frame >= self.num_frames {
            return Err(Error::Contract(format!(
                "frame {frame} out of range for a track of {} frames",
                self.num_frames
            )));
        }
        let half = (w / 2) as isize;
        let last = self.num_frames as isize - 1;
        let mut out = Vec::with_capacity(w * self.logit_dim);
        for k in 0..w as isize {
            let src = (frame as isize - half + k).clamp(0, last) as usize;
            out.extend_from_slice(self.row(src));
        }
        Ok(out)
    }
}

/// `[frame − 8, frame + 8)` rows of `track`, edge-padded.
pub fn window_logits(track: &LogitsTrack, frame: usize) -> Result<Vec<f32>, Error> {
    track.window(frame, 16)
}

/// `â_0 = a_0`, `â_i = β·â_{i−1} + (1 − β)·a_i`.
pub fn momentum_smooth(codes: &[Vec<f32>], beta: f64) -> Vec<Vec<f32>> {
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(codes.len());
    for a in codes {
        let next = match out.last() {
            None => a.clone(),
            Some(prev) => prev
                .iter()
                .zip(a)
                .map(|(&p, &x)| (beta * p as f64 + (1.0 - beta) * x as f64) as f32)
                .collect(),
        };
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    pub config: AudioConfig,
    conv: Vec<Layer>,
    proj: Layer,
    attention: Layer,
}

impl AudioEncoder {
    pub fn new<T: Real, R: Rng>(config: AudioConfig, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        assert_eq!(config.window >> config.conv_widths.len(), 1, "conv stack must reduce the window to one step");
        let mut conv = Vec::new();
        let mut cin = config.logit_dim;
        for (i, &cout) in config.conv_widths.iter().enumerate() {
            conv.push(dense(store, rng, &format!("audio.conv{i}"), 3 * cin, cout));
            cin = cout;
        }
        let proj = dense(store, rng, "audio.proj", cin, config.code_dim);
        let attention = dense(
            store,
            rng,
            "audio.attention",
            config.attention_window * config.code_dim,
            config.attention_window,
        );
        Self { config, conv, proj, attention }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.conv
            .iter()
            .chain([&self.proj, &self.attention])
            .flat_map(|l| l.ids())
            .collect()
    }

    /// Conv stack + projection over `k` stacked windows (`[k·16, L_in]`),
    /// giving `[k, 64]` frame features.
    pub fn encode_windows<T: Real>(&self, tape: &mut Tape<'_, T>, windows: Var) -> Result<Var, TensorError> {
        let (rows, cols) = tape.shape(windows);
        let w = self.config.window;
        if cols != self.config.logit_dim || rows % w != 0 {
            return Err(TensorError::ShapeMismatch { op: "audio encode", left: (rows, cols), right: (w, self.config.logit_dim) });
        }
        let k = rows / w;
        let mut h = windows;
        let mut t_in = w;
        let mut cin = cols;
        for layer in &self.conv {
            let t_out = t_in.div_ceil(2);
            let cols = im2col(k, t_in, t_out, cin);
            let x = tape.gather(h, cols, k * t_out, 3 * cin)?;
            let y = layer.forward(tape, x)?;
            h = tape.leaky_relu(y, self.config.leaky_slope);
            t_in = t_out;
            cin = tape.shape(h).1;
        }
        self.proj.forward(tape, h)
    }

    /// Softmax-weighted sum of `[8, 64]` frame features (oldest first).
    pub fn attend<T: Real>(&self, tape: &mut Tape<'_, T>, features: Var) -> Result<Var, TensorError> {
        let weights = self.attention_weights(tape, features)?;
        tape.matmul(weights, features)
    }

    /// Softmax over position-aware scores of the flattened window.
    pub fn attention_weights<T: Real>(&self, tape: &mut Tape<'_, T>, features: Var) -> Result<Var, TensorError> {
        let (n, d) = tape.shape(features);
        let flat = tape.reshape(features, 1, n * d)?;
        let scores = self.attention.forward(tape, flat)?;
        Ok(tape.softmax_rows(scores))
    }

    /// Stacked logit windows for the 8 frames ending at `frame`.
    pub fn code_inputs(&self, track: &LogitsTrack, frame: usize) -> Result<Vec<f32>, Error> {
        let n = self.config.attention_window;
        let mut out = Vec::with_capacity(n * self.config.window * track.logit_dim);
        for j in 0..n {
            let f = (frame as isize - (n as isize - 1) + j as isize).max(0) as usize;
            out.extend(track.window(f, self.config.window)?);
        }
        Ok(out)
    }

    /// The 64-d code for `frame` as a `[1, 64]` tape node.
    pub fn code<T: Real>(&self, tape: &mut Tape<'_, T>, track: &LogitsTrack, frame: usize) -> Result<Var, Error> {
        if track.logit_dim != self.config.logit_dim {
            return Err(Error::Validation(format!(
                "logit dimension {} does not match the model's {}",
                track.logit_dim, self.config.logit_dim
            )));
        }
        let input = self.code_inputs(track, frame)?;
        let rows = self.config.attention_window * self.config.window;
        let x = tape.constant(input.into_iter().map(|v| lit(v as f64)).collect(), rows, track.logit_dim)?;
        let feats = self.encode_windows(tape, x)?;
        Ok(self.attend(tape, feats)?)
    }

    /// Codes for every frame of a track with frozen weights.
    pub fn codes(&self, params: &ParamStore<f32>, track: &LogitsTrack) -> Result<Vec<Vec<f32>>, Error> {
        (0..track.num_frames)
            .map(|f| {
                let mut tape = Tape::inference(params);
                let a = self.code(&mut tape, track, f)?;
                Ok(tape.value(a).to_vec())
            })
            .collect()
    }
}

/// Gather indices for a kernel-3, stride-2, zero-padded-by-1 convolution over
/// `k` independent sequences of length `t_in`.
fn im2col(k: usize, t_in: usize, t_out: usize, cin: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(k * t_out * 3 * cin);
    for w in 0..k {
        for t in 0..t_out {
            for tap in 0..3 {
                let src = (2 * t + tap) as isize - 1;
                for c in 0..cin {
                    if src < 0 || src >= t_in as isize {
                        idx.push(GATHER_ZERO);
                    } else {
                        idx.push(((w * t_in + src as usize) * cin + c) as u32);
                    }
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn track(n: usize) -> LogitsTrack {
        LogitsTrack::new(n, 2, (0..n * 2).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn window_interior_and_edges() {
        let t = track(40);
        let w = window_logits(&t, 20).unwrap();
        let first_rows: Vec<f32> = w.chunks(2).map(|r| r[0] / 2.0).collect();
        assert_eq!(first_rows, (12..28).map(|f| f as f32).collect::<Vec<_>>());

        let w0 = window_logits(&t, 0).unwrap();
        assert!(w0[..16].chunks(2).all(|r| r == t.row(0)));
        assert_eq!(&w0[16..18], t.row(0));
        assert_eq!(&w0[18..20], t.row(1));

        let single = track(1);
        let w1 = window_logits(&single, 0).unwrap();
        assert!(w1.chunks(2).all(|r| r == single.row(0)));
        assert!(window_logits(&single, 1).is_err());
    }

    #[test]
    fn momentum_examples() {
        let seq = vec![vec![0.0f32], vec![1.0], vec![1.0]];
        let s = momentum_smooth(&seq, 0.5);
        assert_eq!(s, vec![vec![0.0], vec![0.5], vec![0.75]]);
        assert_eq!(momentum_smooth(&seq, 0.0), seq);
        let c = vec![vec![0.3f32, -1.0]; 5];
        assert_eq!(momentum_smooth(&c, 0.7), c);
    }

    fn encoder() -> (AudioEncoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = AudioEncoder::new(AudioConfig::default(), &mut store, &mut rng);
        (enc, store)
    }

    #[test]
    fn zero_window_with_zero_bias_gives_zero() {
        let (enc, store) = encoder();
        let mut tape = Tape::inference(&store);
        let x = tape.constant(vec![0.0; 16 * 29], 16, 29).unwrap();
        let f = enc.encode_windows(&mut tape, x).unwrap();
        assert_eq!(tape.shape(f), (1, 64));
        assert!(tape.value(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic() {
        let (enc, store) = encoder();
        let input: Vec<f64> = (0..16 * 29).map(|i| ((i * 37) % 11) as f64 * 0.1).collect();
        let run = || {
            let mut tape = Tape::inference(&store);
            let x = tape.constant(input.clone(), 16, 29).unwrap();
            let f = enc.encode_windows(&mut tape, x).unwrap();
            tape.value(f).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn attention_of_identical_features_is_that_feature() {
        let (enc, store) = encoder();
        let row: Vec<f64> = (0..64).map(|i| i as f64 * 0.01 - 0.3).collect();
        let mut tape = Tape::inference(&store);
        let feats = tape.constant(row.iter().cycle().take(8 * 64).copied().collect(), 8, 64).unwrap();
        let a = enc.attend(&mut tape, feats).unwrap();
        for (x, y) in tape.value(a).iter().zip(&row) {
            assert!((x - y).abs() < 1e-12);
        }
        let w = enc.attention_weights(&mut tape, feats).unwrap();
        let s: f64 = tape.value(w).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(tape.value(w).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn saturated_attention_selects_one_frame() {
        let (enc, mut store) = encoder();
        let bias = store.find("audio.attention.bias").unwrap();
        let weight = store.find("audio.attention.weight").unwrap();
        store.value_mut(weight).fill(0.0);
        store.value_mut(bias)[5] = 60.0;
        let mut tape = Tape::inference(&store);
        let feats: Vec<f64> = (0..8 * 64).map(|i| (i / 64) as f64).collect();
        let f = tape.constant(feats, 8, 64).unwrap();
        let a = enc.attend(&mut tape, f).unwrap();
        assert!(tape.value(a).iter().all(|&v| (v - 5.0).abs() < 1e-9));
    }

    #[test]
    fn track_validation() {
        assert!(LogitsTrack::new(0, 29, vec![]).is_err());
        assert!(LogitsTrack::new(2, 2, vec![0.0; 3]).is_err());
        assert!(LogitsTrack::new(1, 2, vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn code_over_track_has_code_dim() {
        let (enc, store) = encoder();
        let store32: ParamStore<f32> = store.cast();
        let t = LogitsTrack::new(5, 29, (0..5 * 29).map(|i| (i % 7) as f32 * 0.2).collect()).unwrap();
        let codes = enc.codes(&store32, &t).unwrap();
        assert_eq!(codes.len(), 5);
        assert!(codes.iter().all(|c| c.len() == 64 && c.iter().all(|v| v.is_finite())));
    }
}
