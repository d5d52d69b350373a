//! Analytic talking-head scene: a soft sphere with a mouth cavity carved by
//! the audio drive, eye discs sized by the eye ratio, a pose-tied torso with
//! an in-painted neck, and a checkerboard background.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{neck_inpaint, write_mask, write_rgb, FrameRecord, LogitsRecord, Manifest, Rect, Split, SCHEMA_VERSION};
use crate::render::{ray_through, Camera, Pose, Ray};
use crate::Error;

/// Scene description. Missing keys in a JSON spec take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub test_fraction: f64,

    pub head_center: [f64; 3],
    pub head_radius: f64,
    /// Width of the density transition at the surface.
    pub sharpness: f64,
    pub sigma_max: f64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    /// Points with `y` below this are hair.
    pub hair_line: f64,

    pub mouth_x: [f64; 2],
    pub mouth_y: f64,
    /// Cavity height at full opening is `mouth_height · m`.
    pub mouth_height: f64,
    /// The cavity reaches back to this depth.
    pub mouth_depth: f64,
    pub lip_width: f64,
    pub lip_color: [f64; 3],
    pub cavity_color: [f64; 3],
    /// Scales the mouth drive; 0 keeps the mouth closed in every frame.
    pub mouth_amplitude: f64,

    pub eye_offset: f64,
    pub eye_y: f64,
    /// Eye radius at ratio 0.005; radius scales linearly with the ratio.
    pub eye_radius: f64,
    pub eye_color: [f64; 3],
    pub eye_ratio_max: f64,

    /// Nominal head-to-camera translation.
    pub translation: [f64; 3],
    pub translation_jitter: [f64; 3],
    /// Yaw, pitch and roll amplitudes in degrees.
    pub rotation_jitter_deg: [f64; 3],

    pub shirt: [f64; 3],
    pub neck: [f64; 3],
    /// Fraction of the projected head shift the torso follows.
    pub torso_follow: f64,
    pub checker_size: usize,
    pub checker: [[f64; 3]; 2],
    pub inpaint_gamma: f64,
    pub inpaint_rows: usize,

    pub logit_dim: usize,
    pub logit_noise: f64,
    /// Quadrature samples per ray for the ground-truth images.
    pub samples: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_frames: 500,
            width: 64,
            height: 64,
            focal: 110.0,
            test_fraction: 0.1,
            head_center: [0.5, 0.5, 0.5],
            head_radius: 0.4,
            sharpness: 0.006,
            sigma_max: 200.0,
            skin: [0.9, 0.7, 0.6],
            hair: [0.25, 0.15, 0.08],
            hair_line: 0.22,
            mouth_x: [0.39, 0.61],
            mouth_y: 0.68,
            mouth_height: 0.2,
            mouth_depth: 0.24,
            lip_width: 0.03,
            lip_color: [0.85, 0.35, 0.35],
            cavity_color: [0.12, 0.03, 0.05],
            mouth_amplitude: 1.0,
            eye_offset: 0.15,
            eye_y: 0.40,
            eye_radius: 0.09,
            eye_color: [0.05, 0.05, 0.12],
            eye_ratio_max: 0.005,
            translation: [-0.5, -0.68, 2.0],
            translation_jitter: [0.06, 0.03, 0.03],
            rotation_jitter_deg: [6.0, 4.0, 3.0],
            shirt: [0.2, 0.3, 0.7],
            neck: [0.75, 0.55, 0.45],
            torso_follow: 0.8,
            checker_size: 8,
            checker: [[0.75, 0.75, 0.7], [0.55, 0.6, 0.65]],
            inpaint_gamma: 0.98,
            inpaint_rows: 10,
            logit_dim: 29,
            logit_noise: 0.05,
            samples: 256,
        }
    }
}

/// Per-frame drive of the analytic field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameState {
    pub mouth: f64,
    pub eye_ratio: f64,
    pub pose: Pose,
}

/// Sum of sinusoids with periods in `[20, 60]` frames, normalized to `[−1, 1]`.
#[derive(Debug, Clone)]
struct Wave {
    terms: Vec<(f64, f64, f64)>,
}

impl Wave {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let terms: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| (rng.random_range(0.5..1.0), rng.random_range(20.0..60.0), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        Self { terms }
    }

    fn at(&self, t: f64) -> f64 {
        let total: f64 = self.terms.iter().map(|x| x.0).sum();
        self.terms.iter().map(|&(a, p, ph)| a * (std::f64::consts::TAU * t / p + ph).sin()).sum::<f64>() / total
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub camera: Camera,
    pub states: Vec<FrameState>,
    pub logits: Vec<f32>,
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]]
}

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    [[a.cos(), 0.0, a.sin()], [0.0, 1.0, 0.0], [-a.sin(), 0.0, a.cos()]]
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]]
}

fn matmul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn box_sdf(p: [f64; 3], center: [f64; 3], half: [f64; 3]) -> f64 {
    let q = [0, 1, 2].map(|k| (p[k] - center[k]).abs() - half[k]);
    let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
    outside + q[0].max(q[1]).max(q[2]).min(0.0)
}

fn rect_sdf(p: [f64; 2], center: [f64; 2], half: [f64; 2]) -> f64 {
    let q = [(p[0] - center[0]).abs() - half[0], (p[1] - center[1]).abs() - half[1]];
    let outside = (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2)).sqrt();
    outside + q[0].max(q[1]).min(0.0)
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

impl SceneSpec {
    pub fn camera(&self) -> Camera {
        Camera {
            width: self.width,
            height: self.height,
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }

    pub fn nominal_pose(&self) -> Pose {
        Pose::from_rt(rot_x(0.0), self.translation)
    }

    /// Pose rotated about the head centre by (yaw, pitch, roll) and shifted.
    pub fn pose(&self, yaw: f64, pitch: f64, roll: f64, shift: [f64; 3]) -> Pose {
        let r = matmul3(rot_z(roll), matmul3(rot_y(yaw), rot_x(pitch)));
        let c = self.head_center;
        let rc = [0, 1, 2].map(|i| r[i][0] * c[0] + r[i][1] * c[1] + r[i][2] * c[2]);
        let t = [0, 1, 2].map(|i| self.translation[i] + shift[i] + c[i] - rc[i]);
        Pose::from_rt(r, t)
    }

    fn mouth_box(&self, m: f64) -> ([f64; 3], [f64; 3]) {
        let hx = (self.mouth_x[1] - self.mouth_x[0]) / 2.0;
        let hy = self.mouth_height * m / 2.0;
        let z0 = -0.1;
        let center = [(self.mouth_x[0] + self.mouth_x[1]) / 2.0, self.mouth_y, (z0 + self.mouth_depth) / 2.0];
        (center, [hx, hy, (self.mouth_depth - z0) / 2.0])
    }

    /// Signed distance to the head surface at mouth opening `m`.
    pub fn sdf(&self, p: [f64; 3], m: f64) -> f64 {
        let c = self.head_center;
        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt() - self.head_radius;
        if m <= 0.0 {
            return d;
        }
        let (bc, bh) = self.mouth_box(m);
        d.max(-box_sdf(p, bc, bh))
    }

    pub fn density(&self, p: [f64; 3], m: f64) -> f64 {
        self.sigma_max * sigmoid(-self.sdf(p, m) / self.sharpness)
    }

    pub fn eye_centers(&self) -> [[f64; 3]; 2] {
        let c = self.head_center;
        let r = self.head_radius;
        [-1.0, 1.0].map(|s| {
            let x = c[0] + s * self.eye_offset;
            let dy = self.eye_y - c[1];
            let z = c[2] - (r * r - self.eye_offset * self.eye_offset - dy * dy).sqrt();
            [x, self.eye_y, z]
        })
    }

    pub fn eye_radius_for(&self, eye_ratio: f64) -> f64 {
        self.eye_radius * eye_ratio / self.eye_ratio_max
    }

    pub fn color(&self, p: [f64; 3], state: &FrameState) -> [f64; 3] {
        let m = state.mouth;
        if m > 0.0 {
            let (bc, bh) = self.mouth_box(m);
            if box_sdf(p, bc, bh) < 0.015 {
                return self.cavity_color;
            }
        }
        let (bc, bh) = self.mouth_box(m.max(0.0));
        let lip = rect_sdf([p[0], p[1]], [bc[0], bc[1]], [bh[0], bh[1]]);
        if lip < self.lip_width && p[2] < 0.3 {
            return self.lip_color;
        }
        let r = self.eye_radius_for(state.eye_ratio);
        for e in self.eye_centers() {
            let d = ((p[0] - e[0]).powi(2) + (p[1] - e[1]).powi(2) + (p[2] - e[2]).powi(2)).sqrt();
            if d < r {
                return self.eye_color;
            }
        }
        if p[1] < self.hair_line {
            return self.hair;
        }
        self.skin
    }

    pub fn background(&self) -> Vec<f32> {
        let mut bg = Vec::with_capacity(self.width * self.height * 3);
        for r in 0..self.height {
            for c in 0..self.width {
                let k = (r / self.checker_size + c / self.checker_size) % 2;
                bg.extend(self.checker[k].map(|v| v as f32));
            }
        }
        bg
    }

    /// Projected displacement of the head centre relative to the nominal pose.
    fn head_shift(&self, pose: &Pose) -> [f64; 2] {
        let cam = self.camera();
        let a = cam.project(pose.to_camera(self.head_center));
        let b = cam.project(self.nominal_pose().to_camera(self.head_center));
        [a[0] - b[0], a[1] - b[1]]
    }

    /// Torso layer: straight colour, coverage, and the fully covered neck pixels.
    pub fn torso_layer(&self, pose: &Pose) -> (Vec<f32>, Vec<f32>, Vec<bool>) {
        let shift = self.head_shift(pose);
        let (sx, sy) = (shift[0] * self.torso_follow, shift[1] * self.torso_follow);
        let (w, h) = (self.width, self.height);
        let cx = w as f64 / 2.0 + sx;
        let top = 50.0 / 64.0 * h as f64 + sy;
        let neck_top = 44.0 / 64.0 * h as f64 + sy;
        let neck_half = 5.0 / 64.0 * w as f64;
        let half_top = 14.0 / 64.0 * w as f64;
        let slope = 0.9;
        let mut rgb = vec![0.0f32; w * h * 3];
        let mut cover = vec![0.0f32; w * h];
        let mut neck = vec![false; w * h];
        const SS: usize = 4;
        for r in 0..h {
            for c in 0..w {
                let (mut n_shirt, mut n_neck) = (0usize, 0usize);
                for i in 0..SS {
                    for j in 0..SS {
                        let y = r as f64 + (i as f64 + 0.5) / SS as f64;
                        let x = c as f64 + (j as f64 + 0.5) / SS as f64;
                        if y >= top && (x - cx).abs() <= half_top + slope * (y - top) {
                            n_shirt += 1;
                        } else if y >= neck_top && (x - cx).abs() <= neck_half {
                            n_neck += 1;
                        }
                    }
                }
                let total = (SS * SS) as f32;
                let cov = (n_shirt + n_neck) as f32 / total;
                let i = r * w + c;
                cover[i] = cov;
                if n_shirt + n_neck > 0 {
                    let a = n_shirt as f32 / (n_shirt + n_neck) as f32;
                    for k in 0..3 {
                        rgb[i * 3 + k] = a * self.shirt[k] as f32 + (1.0 - a) * self.neck[k] as f32;
                    }
                }
                neck[i] = n_neck == SS * SS;
            }
        }
        (rgb, cover, neck)
    }

    /// Torso over background with the neck in-painted upward.
    pub fn plate(&self, pose: &Pose) -> Vec<f32> {
        let (rgb, cover, neck) = self.torso_layer(pose);
        let bg = self.background();
        let raw: Vec<f32> = (0..rgb.len()).map(|i| rgb[i] * cover[i / 3] + (1.0 - cover[i / 3]) * bg[i]).collect();
        neck_inpaint(&raw, &neck, self.width, self.height, self.inpaint_gamma, Some(self.inpaint_rows)).0
    }

    /// Head-sphere hit that is not hair.
    pub fn face_mask(&self, pose: &Pose) -> Vec<bool> {
        let cam = self.camera();
        let mut mask = Vec::with_capacity(self.width * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let ray = ray_through(&cam, pose, c as f64 + 0.5, r as f64 + 0.5, (r, c));
                let hit = sphere_hit(&ray, self.head_center, self.head_radius);
                mask.push(matches!(hit, Some(p) if p[1] >= self.hair_line));
            }
        }
        mask
    }

    fn project_bbox(&self, pose: &Pose, pts: &[[f64; 3]]) -> Rect {
        let cam = self.camera();
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &p in pts {
            let q = cam.project(pose.to_camera(p));
            x0 = x0.min(q[0]);
            y0 = y0.min(q[1]);
            x1 = x1.max(q[0]);
            y1 = y1.max(q[1]);
        }
        let cl = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
        let (xa, ya) = (cl(x0.floor(), self.width - 1), cl(y0.floor(), self.height - 1));
        let (xb, yb) = (cl(x1.ceil(), self.width), cl(y1.ceil(), self.height));
        Rect { x: xa, y: ya, w: (xb - xa).max(1), h: (yb - ya).max(1) }
    }

    fn surface_z(&self, x: f64, y: f64) -> f64 {
        let c = self.head_center;
        let r2 = self.head_radius.powi(2) - (x - c[0]).powi(2) - (y - c[1]).powi(2);
        c[2] - r2.max(0.0).sqrt()
    }

    /// Bounding box of the fully opened mouth and its lips.
    pub fn lips_rect(&self, pose: &Pose) -> Rect {
        let lw = self.lip_width;
        let hy = self.mouth_height / 2.0 + lw;
        let mut pts = Vec::new();
        for x in [self.mouth_x[0] - lw, self.mouth_x[1] + lw] {
            for y in [self.mouth_y - hy, self.mouth_y + hy] {
                pts.push([x, y, self.surface_z(x, y)]);
            }
        }
        self.project_bbox(pose, &pts)
    }

    /// Bounding box of both eye discs at the largest ratio.
    pub fn eye_rect(&self, pose: &Pose) -> Rect {
        let r = self.eye_radius;
        let mut pts = Vec::new();
        for e in self.eye_centers() {
            for dx in [-r, r] {
                for dy in [-r, r] {
                    pts.push([e[0] + dx, e[1] + dy, e[2]]);
                }
            }
        }
        self.project_bbox(pose, &pts)
    }

    /// Premultiplied head colour and opacity along a ray by midpoint
    /// quadrature: `δ = Δ` except the last, `min(t_far − t_last, Δ)`.
    pub fn trace(&self, ray: &Ray, state: &FrameState, samples: usize) -> ([f64; 3], f64) {
        if !ray.hit || samples == 0 {
            return ([0.0; 3], 0.0);
        }
        let step = (ray.t_far - ray.t_near) / samples as f64;
        let mut c = [0.0; 3];
        let mut trans = 1.0;
        for j in 0..samples {
            let t = ray.t_near + (j as f64 + 0.5) * step;
            let delta = if j + 1 == samples { (ray.t_far - t).min(step) } else { step };
            let p = ray.at(t);
            let alpha = 1.0 - (-self.density(p, state.mouth) * delta).exp();
            if alpha > 0.0 {
                let w = trans * alpha;
                let col = self.color(p, state);
                for k in 0..3 {
                    c[k] += w * col[k];
                }
                trans *= 1.0 - alpha;
            }
        }
        (c, 1.0 - trans)
    }

    /// Float head layer for a whole frame: `(premultiplied rgb, opacity)`.
    pub fn head_layer(&self, state: &FrameState, samples: usize) -> (Vec<f64>, Vec<f64>) {
        let cam = self.camera();
        let mut rgb = Vec::with_capacity(self.width * self.height * 3);
        let mut op = Vec::with_capacity(self.width * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let ray = ray_through(&cam, &state.pose, c as f64 + 0.5, r as f64 + 0.5, (r, c));
                let (col, o) = self.trace(&ray, state, samples);
                rgb.extend(col);
                op.push(o);
            }
        }
        (rgb, op)
    }

    /// Ground-truth float image: head over the torso plate.
    pub fn frame_image(&self, state: &FrameState) -> Vec<f64> {
        let (head, op) = self.head_layer(state, self.samples);
        let plate = self.plate(&state.pose);
        (0..head.len()).map(|i| head[i] + (1.0 - op[i / 3]) * plate[i] as f64).collect()
    }

    /// Dark-pixel count the mouth would show, from the analytic field.
    pub fn is_dark(c: [f64; 3]) -> bool {
        luminance(c) < 0.3
    }
}

fn sphere_hit(ray: &Ray, c: [f64; 3], r: f64) -> Option<[f64; 3]> {
    let oc = [0, 1, 2].map(|k| ray.origin[k] - c[k]);
    let b: f64 = (0..3).map(|k| oc[k] * ray.dir[k]).sum();
    let cc: f64 = oc.iter().map(|v| v * v).sum::<f64>() - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 0.0).then(|| ray.at(t))
}

impl SyntheticScene {
    pub fn new(spec: SceneSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mouth = Wave::random(&mut rng);
        let eye = Wave::random(&mut rng);
        let pose_waves: Vec<Wave> = (0..6).map(|_| Wave::random(&mut rng)).collect();
        let deg = std::f64::consts::PI / 180.0;
        let states: Vec<FrameState> = (0..spec.num_frames)
            .map(|i| {
                let t = i as f64;
                let m = ((0.4 + 0.75 * mouth.at(t)) * spec.mouth_amplitude).clamp(0.0, 1.0);
                let e = spec.eye_ratio_max * (0.55 + 0.7 * eye.at(t)).clamp(0.0, 1.0);
                let rj = spec.rotation_jitter_deg;
                let tj = spec.translation_jitter;
                let pose = spec.pose(
                    rj[0] * deg * pose_waves[0].at(t),
                    rj[1] * deg * pose_waves[1].at(t),
                    rj[2] * deg * pose_waves[2].at(t),
                    [0, 1, 2].map(|k| tj[k] * pose_waves[3 + k].at(t)),
                );
                FrameState { mouth: m, eye_ratio: e, pose }
            })
            .collect();
        let noise = Normal::new(0.0, spec.logit_noise.max(1e-12)).expect("finite noise scale");
        let bins = spec.logit_dim;
        let mut logits = Vec::with_capacity(spec.num_frames * bins);
        for s in &states {
            let centre = s.mouth * (bins - 1) as f64;
            for k in 0..bins {
                let bump = (-(k as f64 - centre).powi(2) / (2.0 * 0.5f64.powi(2))).exp();
                let n = if spec.logit_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                logits.push((bump + n) as f32);
            }
        }
        let camera = spec.camera();
        Self { spec, camera, states, logits }
    }

    pub fn split(&self, i: usize) -> Split {
        let n_test = (self.spec.num_frames as f64 * self.spec.test_fraction).round() as usize;
        if i >= self.spec.num_frames - n_test.min(self.spec.num_frames - 1) {
            Split::Test
        } else {
            Split::Train
        }
    }

    /// Mouth opening recovered as `argmax / (bins − 1)`.
    pub fn decode_mouth(&self, frame: usize) -> f64 {
        let bins = self.spec.logit_dim;
        let row = &self.logits[frame * bins..(frame + 1) * bins];
        let k = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|x| x.0).unwrap_or(0);
        k as f64 / (bins - 1) as f64
    }

    /// Writes the dataset directory.
    pub fn write(&self, dir: &Path) -> Result<Manifest, Error> {
        for sub in ["frames", "torso", "masks", "audio"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let (w, h) = (self.spec.width, self.spec.height);
        write_rgb(&dir.join("background.png"), &self.spec.background(), w, h)?;
        let bytes: Vec<u8> = self.logits.iter().flat_map(|v| v.to_le_bytes()).collect();
        let lp = dir.join("audio/logits.f32");
        fs::write(&lp, bytes).map_err(|e| Error::io(&lp, e))?;

        let records: Result<Vec<FrameRecord>, Error> = self
            .states
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let image: Vec<f32> = self.spec.frame_image(s).iter().map(|&v| v as f32).collect();
                let plate = self.spec.plate(&s.pose);
                let mask = self.spec.face_mask(&s.pose);
                let name = format!("{i:04}.png");
                write_rgb(&dir.join("frames").join(&name), &image, w, h)?;
                write_rgb(&dir.join("torso").join(&name), &plate, w, h)?;
                write_mask(&dir.join("masks").join(&name), &mask, w, h)?;
                Ok(FrameRecord {
                    image: format!("frames/{name}"),
                    torso: format!("torso/{name}"),
                    mask: format!("masks/{name}"),
                    pose: s.pose.matrix,
                    eye_ratio: s.eye_ratio,
                    lips: self.spec.lips_rect(&s.pose),
                    audio_index: i,
                    split: self.split(i),
                    eye_rect: Some(self.spec.eye_rect(&s.pose)),
                })
            })
            .collect();
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            camera: self.camera,
            logits: LogitsRecord { path: "audio/logits.f32".into(), num_frames: self.spec.num_frames, dim: self.spec.logit_dim },
            background: "background.png".into(),
            frames: records?,
        };
        let mp = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
        let sp = dir.join("scene.json");
        fs::write(&sp, serde_json::to_string_pretty(&self.spec)?).map_err(|e| Error::io(&sp, e))?;
        Ok(manifest)
    }
}

/// Generates the synthetic dataset for `spec` under `dir`.
pub fn generate_synthetic(spec: &SceneSpec, seed: u64, dir: &Path) -> Result<SyntheticScene, Error> {
    let scene = SyntheticScene::new(spec.clone(), seed);
    scene.write(dir)?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneSpec {
        SceneSpec { num_frames: 40, samples: 64, ..SceneSpec::default() }
    }

    #[test]
    fn logits_decode_mouth_within_one_bin() {
        let s = SyntheticScene::new(SceneSpec { num_frames: 500, ..SceneSpec::default() }, 42);
        for i in 0..500 {
            assert!((s.decode_mouth(i) - s.states[i].mouth).abs() <= 1.0 / 28.0 + 1e-12, "frame {i}");
        }
        // The drive covers closures and wide openings.
        assert!(s.states.iter().any(|st| st.mouth == 0.0));
        assert!(s.states.iter().any(|st| st.mouth > 0.8));
    }

    #[test]
    fn poses_are_rigid() {
        let s = SyntheticScene::new(small(), 1);
        for st in &s.states {
            assert!(st.pose.orthonormality_error() < 1e-12);
            assert!((st.pose.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn density_is_bounded_and_nonnegative() {
        let spec = SceneSpec::default();
        for i in 0..1000 {
            let p = [(i % 10) as f64 / 9.0, (i / 10 % 10) as f64 / 9.0, (i / 100) as f64 / 9.0];
            let d = spec.density(p, 0.7);
            assert!((0.0..=spec.sigma_max).contains(&d));
        }
    }

    #[test]
    fn closed_mouth_frames_share_the_mouth_region() {
        let spec = SceneSpec { mouth_amplitude: 0.0, samples: 64, ..SceneSpec::default() };
        let s = SyntheticScene::new(spec.clone(), 3);
        let pose = spec.nominal_pose();
        let a = FrameState { pose, ..s.states[0] };
        let b = FrameState { pose, ..s.states[7] };
        assert_eq!(a.mouth, 0.0);
        let ia = spec.frame_image(&a);
        let ib = spec.frame_image(&b);
        let rect = spec.lips_rect(&pose);
        for (r, c) in rect.pixels() {
            let i = (r * spec.width + c) * 3;
            assert_eq!(ia[i..i + 3], ib[i..i + 3]);
        }
    }

    #[test]
    fn open_mouth_is_dark_inside_the_lips_rect() {
        let spec = SceneSpec { samples: 128, ..SceneSpec::default() };
        let pose = spec.nominal_pose();
        let count = |m: f64| {
            let img = spec.frame_image(&FrameState { mouth: m, eye_ratio: 0.0025, pose });
            spec.lips_rect(&pose)
                .pixels()
                .iter()
                .filter(|&&(r, c)| {
                    let i = (r * spec.width + c) * 3;
                    SceneSpec::is_dark([img[i], img[i + 1], img[i + 2]])
                })
                .count()
        };
        let (c0, c5, c1) = (count(0.0), count(0.5), count(1.0));
        assert_eq!(c0, 0);
        assert!(c5 > 0 && c1 > c5, "{c0} {c5} {c1}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = SyntheticScene::new(small(), 9);
        let b = SyntheticScene::new(small(), 9);
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.spec.frame_image(&a.states[3]), b.spec.frame_image(&b.states[3]));
    }
}
