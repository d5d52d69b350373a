//! Flat JSON run configuration. Values resolve as flags over file over the
//! profile defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::audio::AudioConfig;
use crate::autograd::AdamConfig;
use crate::grid::GridConfig;
use crate::head::HeadConfig;
use crate::occupancy::{DEFAULT_RESOLUTION, DEFAULT_THRESHOLD};
use crate::torso::TorsoConfig;
use crate::Error;

/// Keys that change parameter shapes or the occupancy layout.
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "audio_dim",
    "hidden",
    "geo_feat",
    "embed_dim",
    "code_dim",
    "grid_levels",
    "grid_channels",
    "grid_base_resolution",
    "grid_max_resolution",
    "grid_log2_table_size",
    "occupancy_resolution",
];

fn read_object(file: Option<&Path>) -> Result<Map<String, Value>, Error> {
    let Some(p) = file else { return Ok(Map::new()) };
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    match serde_json::from_str::<Value>(&text).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Validation(format!("{}: config must be a JSON object", p.display()))),
    }
}

fn to_map(cfg: &RunConfig) -> Result<Map<String, Value>, Error> {
    match serde_json::to_value(cfg)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!("config serializes to an object"),
    }
}

fn from_map(m: Map<String, Value>) -> Result<RunConfig, Error> {
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Validation(format!("config: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub desk: bool,
    pub seed: u64,

    pub head_steps: u64,
    pub lips_steps: u64,
    pub torso_steps: u64,
    pub rays_per_step: usize,
    pub torso_pixels_per_step: usize,
    pub lips_patch: usize,
    pub lambda_entropy: f64,
    pub lambda_dynamic: f64,
    pub lambda_struct: f64,
    pub lr_net: f64,
    pub lr_grid: f64,
    pub lr_decay_target: f64,
    pub ema_decay: f64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,

    pub audio_dim: usize,
    pub hidden: usize,
    pub geo_feat: usize,
    pub embed_dim: usize,
    pub code_dim: usize,
    pub grid_levels: usize,
    pub grid_channels: usize,
    pub grid_base_resolution: u32,
    pub grid_max_resolution: u32,
    pub grid_log2_table_size: u32,

    pub candidates: usize,
    pub max_samples: usize,
    pub prune: bool,
    pub occupancy_resolution: usize,
    pub occupancy_threshold: f32,
    pub occupancy_interval: u64,
    pub warmup_steps: u64,
    pub recompute_conditions: usize,

    pub beta: f64,
    /// Overrides every frame's eye ratio at inference.
    pub eye_ratio: Option<f64>,
    /// Appearance embedding used for rendering.
    pub test_embedding: usize,
}

impl RunConfig {
    /// The published recipe.
    pub fn full() -> Self {
        Self {
            desk: false,
            seed: 0,
            head_steps: 20_000,
            lips_steps: 5_000,
            torso_steps: 20_000,
            rays_per_step: 256 * 256,
            torso_pixels_per_step: 256 * 256,
            lips_patch: 64,
            lambda_entropy: 0.001,
            lambda_dynamic: 0.1,
            lambda_struct: 0.01,
            lr_net: 5e-4,
            lr_grid: 5e-3,
            lr_decay_target: 0.1,
            ema_decay: 0.95,
            checkpoint_interval: 1000,
            log_interval: 1,
            audio_dim: 2,
            hidden: 64,
            geo_feat: 64,
            embed_dim: 8,
            code_dim: 64,
            grid_levels: 16,
            grid_channels: 2,
            grid_base_resolution: 16,
            grid_max_resolution: 2048,
            grid_log2_table_size: 16,
            candidates: crate::render::DEFAULT_CANDIDATES,
            max_samples: crate::render::DEFAULT_MAX_SAMPLES,
            prune: true,
            occupancy_resolution: DEFAULT_RESOLUTION,
            occupancy_threshold: DEFAULT_THRESHOLD,
            occupancy_interval: 16,
            warmup_steps: 500,
            recompute_conditions: 32,
            beta: 0.5,
            eye_ratio: None,
            test_embedding: 0,
        }
    }

    /// 64×64 images and roughly 16× fewer steps and rays.
    pub fn desk() -> Self {
        Self {
            desk: true,
            head_steps: 5_000,
            lips_steps: 1_000,
            torso_steps: 5_000,
            rays_per_step: 64 * 64,
            torso_pixels_per_step: 64 * 64,
            lips_patch: 32,
            ..Self::full()
        }
    }

    pub fn profile(desk: bool) -> Self {
        if desk {
            Self::desk()
        } else {
            Self::full()
        }
    }

    /// Profile defaults, then the file's keys, then `overrides`. The profile
    /// is chosen by a `desk` key in the overrides, else in the file.
    pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> Result<Self, Error> {
        let file_map = read_object(file)?;
        let desk = overrides
            .get("desk")
            .or_else(|| file_map.get("desk"))
            .and_then(Value::as_bool)
            .unwrap_or(false);
        Self::profile(desk).layered(file_map, overrides)
    }

    /// This config with a file and flags layered on top, for stages that
    /// continue an existing checkpoint. Architecture keys may not change.
    /// Switching `desk` moves the keys still at the old profile's value to
    /// the new profile's.
    pub fn resume(&self, file: Option<&Path>, overrides: Map<String, Value>) -> Result<Self, Error> {
        let file_map = read_object(file)?;
        let desk = overrides.get("desk").or_else(|| file_map.get("desk")).and_then(Value::as_bool).unwrap_or(self.desk);
        let mut base = to_map(self)?;
        if desk != self.desk {
            let (old, new) = (to_map(&Self::profile(self.desk))?, to_map(&Self::profile(desk))?);
            for (k, v) in new {
                if old.get(&k) != Some(&v) && base.get(&k) == old.get(&k) {
                    base.insert(k, v);
                }
            }
        }
        let start: Self = from_map(base)?;
        let cfg = start.layered(file_map, overrides)?;
        let (a, b) = (to_map(self)?, to_map(&cfg)?);
        for key in ARCHITECTURE_KEYS {
            if a.get(*key) != b.get(*key) {
                return Err(Error::Validation(format!("`{key}` is fixed by the checkpoint and cannot be changed")));
            }
        }
        Ok(cfg)
    }

    fn layered(&self, file: Map<String, Value>, overrides: Map<String, Value>) -> Result<Self, Error> {
        let mut merged = to_map(self)?;
        for (k, v) in file.into_iter().chain(overrides) {
            if !merged.contains_key(&k) {
                return Err(Error::Validation(format!("unknown config key `{k}`")));
            }
            merged.insert(k, v);
        }
        let cfg = from_map(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(1..=3).contains(&self.audio_dim) {
            return bad(format!("audio_dim must be 1, 2 or 3, got {}", self.audio_dim));
        }
        for (name, v) in [
            ("rays_per_step", self.rays_per_step),
            ("torso_pixels_per_step", self.torso_pixels_per_step),
            ("lips_patch", self.lips_patch),
            ("candidates", self.candidates),
            ("max_samples", self.max_samples),
            ("occupancy_resolution", self.occupancy_resolution),
            ("grid_levels", self.grid_levels),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("lambda_entropy", self.lambda_entropy),
            ("lambda_dynamic", self.lambda_dynamic),
            ("lambda_struct", self.lambda_struct),
            ("lr_net", self.lr_net),
            ("lr_grid", self.lr_grid),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if let Some(e) = self.eye_ratio {
            if !(0.0..=crate::dataset::MAX_EYE_RATIO).contains(&e) {
                return bad(format!("eye_ratio must lie in [0, 0.01], got {e}"));
            }
        }
        if self.grid_log2_table_size > 24 {
            return bad(format!("grid_log2_table_size {} is too large", self.grid_log2_table_size));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            levels: self.grid_levels,
            channels: self.grid_channels,
            base_resolution: self.grid_base_resolution,
            max_resolution: self.grid_max_resolution,
            log2_table_size: self.grid_log2_table_size,
        }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            audio_dim: self.audio_dim,
            code_dim: self.code_dim,
            hidden: self.hidden,
            geo_feat: self.geo_feat,
            embed_dim: self.embed_dim,
            grid: self.grid(),
        }
    }

    pub fn torso(&self) -> TorsoConfig {
        TorsoConfig { hidden: self.hidden, embed_dim: self.embed_dim, grid: self.grid() }
    }

    pub fn audio(&self, logit_dim: usize) -> AudioConfig {
        AudioConfig { logit_dim, code_dim: self.code_dim, ..AudioConfig::default() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr_net: self.lr_net, lr_grid: self.lr_grid, decay_target: self.lr_decay_target, ..AdamConfig::default() }
    }

    pub fn sampling(&self) -> crate::render::Sampling {
        if self.prune {
            crate::render::Sampling::Pruned { candidates: self.candidates, max_samples: self.max_samples }
        } else {
            crate::render::Sampling::Dense { candidates: self.candidates }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn map(v: Value) -> Map<String, Value> {
        v.as_object().cloned().unwrap()
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"desk": true, "seed": 3, "max_samples": 8}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), map(json!({"max_samples": 32}))).unwrap();
        assert!(c.desk);
        assert_eq!(c.seed, 3);
        assert_eq!(c.max_samples, 32);
        assert_eq!(c.head_steps, 5000);
        assert_eq!(c.lambda_dynamic, 0.1);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::resolve(None, map(json!({"nope": 1}))).is_err());
        assert!(RunConfig::resolve(None, map(json!({"audio_dim": 4}))).is_err());
        assert!(RunConfig::resolve(None, map(json!({"beta": 1.0}))).is_err());
    }

    #[test]
    fn resume_keeps_architecture_and_switches_profiles() {
        let base = RunConfig { head_steps: 7, ..RunConfig::full() };
        let c = base.resume(None, map(json!({"beta": 0.25}))).unwrap();
        assert_eq!((c.beta, c.head_steps), (0.25, 7));
        assert!(base.resume(None, map(json!({"audio_dim": 3}))).is_err());
        let d = RunConfig::full().resume(None, map(json!({"desk": true}))).unwrap();
        assert_eq!((d.desk, d.lips_steps, d.rays_per_step), (true, 1000, 4096));
    }

    #[test]
    fn profiles() {
        let f = RunConfig::full();
        assert_eq!((f.head_steps, f.lips_steps, f.torso_steps, f.rays_per_step), (20000, 5000, 20000, 65536));
        let d = RunConfig::desk();
        assert_eq!((d.head_steps, d.lips_steps, d.torso_steps, d.rays_per_step, d.lips_patch), (5000, 1000, 5000, 4096, 32));
    }
}
