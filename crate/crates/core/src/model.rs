//! The trainable bundle and its checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RADF" | u32 version | u32 stage flags
//! u32 n | n bytes of JSON header (run config, logit dim, embedding count)
//! u32 count | count × { u16 len, name, u8 dtype (0 = f32), u32 rows, u32 cols, payload }
//! u32 R | f32 threshold | R³ × f32 running-max values
//! ```
//!
//! Parameters come first in registration order, then their EMA shadows
//! under `ema:<name>`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioEncoder, LogitsTrack};
use crate::autograd::{Ema, ParamId, ParamStore};
use crate::config::RunConfig;
use crate::head::HeadModel;
use crate::occupancy::OccupancyGrid;
use crate::torso::TorsoModel;
use crate::Error;

pub const MAGIC: &[u8; 4] = b"RADF";
pub const VERSION: u32 = 1;
pub const FLAG_HEAD: u32 = 1;
pub const FLAG_LIPS: u32 = 2;
pub const FLAG_TORSO: u32 = 4;
const EMA_PREFIX: &str = "ema:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    logit_dim: usize,
    num_embeddings: usize,
}

#[derive(Debug, Clone)]
pub struct PortraitModel {
    pub config: RunConfig,
    pub logit_dim: usize,
    pub num_embeddings: usize,
    pub audio: AudioEncoder,
    pub head: HeadModel,
    pub torso: TorsoModel,
    pub params: ParamStore<f32>,
    pub ema: Ema<f32>,
    pub occupancy: OccupancyGrid,
    pub flags: u32,
}

impl PortraitModel {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: RunConfig, logit_dim: usize, num_embeddings: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let audio = AudioEncoder::new(config.audio(logit_dim), &mut params, &mut rng);
        let head = HeadModel::new(config.head(), num_embeddings, &mut params, &mut rng);
        let torso = TorsoModel::new(config.torso(), num_embeddings, &mut params, &mut rng);
        let ema = Ema::new(config.ema_decay, &params, params.ids().collect());
        let occupancy = OccupancyGrid::new(config.occupancy_resolution, config.occupancy_threshold);
        Self { config, logit_dim, num_embeddings, audio, head, torso, params, ema, occupancy, flags: 0 }
    }

    pub fn has(&self, flag: u32) -> bool {
        self.flags & flag != 0
    }

    /// Audio encoder plus head field: everything the head stages train.
    pub fn head_ids(&self) -> Vec<ParamId> {
        let mut ids = self.audio.param_ids();
        ids.extend(self.head.param_ids());
        ids
    }

    pub fn torso_ids(&self) -> Vec<ParamId> {
        self.torso.param_ids()
    }

    /// Parameters with the EMA shadow swapped in, for evaluation.
    pub fn eval_params(&self) -> ParamStore<f32> {
        let mut p = self.params.clone();
        self.ema.apply(&mut p);
        p
    }

    /// Frozen audio codes for every frame of `track`.
    pub fn audio_codes(&self, params: &ParamStore<f32>, track: &LogitsTrack) -> Result<Vec<Vec<f32>>, Error> {
        self.audio.codes(params, track)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, Error> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        let header = Header { config: self.config.clone(), logit_dim: self.logit_dim, num_embeddings: self.num_embeddings };
        let json = serde_json::to_vec(&header)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let count = self.params.len() * 2;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let mut put = |name: &str, rows: usize, cols: usize, data: &[f32]| {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, p) in self.params.iter() {
            put(&p.name, p.rows, p.cols, &p.data);
        }
        for (id, p) in self.params.iter() {
            let shadow = self.ema.shadow(id).expect("every parameter has a shadow");
            put(&format!("{EMA_PREFIX}{}", p.name), p.rows, p.cols, shadow);
        }
        let g = &self.occupancy;
        out.extend_from_slice(&(g.resolution as u32).to_le_bytes());
        out.extend_from_slice(&g.threshold.to_le_bytes());
        for v in g.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let flags = r.u32()?;
        let n = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(n)?)?;
        let mut model = Self::new(header.config, header.logit_dim, header.num_embeddings);
        model.flags = flags;
        let count = r.u32()? as usize;
        if count != model.params.len() * 2 {
            return Err(Error::Checkpoint(format!("{count} tensors, model schema has {}", model.params.len() * 2)));
        }
        let mut shadows: Vec<Option<Vec<f32>>> = vec![None; model.params.len()];
        let mut seen = vec![false; model.params.len()];
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != 0 {
                return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let (base, is_ema) = match name.strip_prefix(EMA_PREFIX) {
                Some(b) => (b, true),
                None => (name.as_str(), false),
            };
            let id = model
                .params
                .find(base)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is not part of the model")))?;
            let p = model.params.get(id);
            if (p.rows, p.cols) != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {rows}x{cols}, model expects {}x{}",
                    p.rows, p.cols
                )));
            }
            let data = r.f32s(rows * cols)?;
            if is_ema {
                if shadows[id.index()].replace(data).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
                }
            } else {
                if std::mem::replace(&mut seen[id.index()], true) {
                    return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
                }
                model.params.value_mut(id).copy_from_slice(&data);
            }
        }
        let shadow: Vec<Vec<f32>> = shadows
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::Checkpoint(format!("missing EMA shadow for parameter {i}"))))
            .collect::<Result<_, _>>()?;
        let ids = model.params.ids().collect();
        model.ema = Ema::with_shadow(model.config.ema_decay, &model.params, ids, shadow);
        let res = r.u32()? as usize;
        let threshold = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let values = r.f32s(res.pow(3))?;
        model.occupancy = OccupancyGrid::from_values(res, threshold, values)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, Error> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig { grid_levels: 4, grid_max_resolution: 64, grid_log2_table_size: 12, occupancy_resolution: 8, ..RunConfig::desk() }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut m = PortraitModel::new(tiny(), 29, 5);
        m.flags = FLAG_HEAD;
        let mut d = vec![0.0f32; 512];
        d[7] = 3.0;
        m.occupancy.merge_max(&d);
        let id = m.params.find("head.density_mlp.0.weight").unwrap();
        m.params.value_mut(id)[0] = 0.25;
        let a = m.to_bytes().unwrap();
        let b = PortraitModel::from_bytes(&a).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = PortraitModel::new(tiny(), 29, 2);
        let bytes = m.to_bytes().unwrap();
        assert!(PortraitModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PortraitModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn schema_has_every_module() {
        let m = PortraitModel::new(tiny(), 29, 3);
        for prefix in ["audio.", "head.spatial", "head.audio_grid", "head.embeddings", "torso."] {
            assert!(m.params.ids_with_prefix(prefix).next().is_some(), "{prefix}");
        }
        assert_eq!(m.head_ids().len() + m.torso_ids().len(), m.params.len());
    }
}
