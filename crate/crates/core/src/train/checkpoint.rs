//! Checkpoints: `step_<N>/params.bin` plus `step_<N>/meta.json`.
//!
//! `params.bin` is `b"STRDPRM1"`, a `u64` entry count, then per entry a
//! `u32` name length, the UTF-8 name, a frozen flag byte, a `u32` rank,
//! `u64` dims and the values as little-endian `f64`. Optimizer moments are
//! stored as entries prefixed `adam_m.` / `adam_v.`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::TrainConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"STRDPRM1";
const M_PREFIX: &str = "adam_m.";
const V_PREFIX: &str = "adam_v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Optimizer steps completed.
    pub step: usize,
    pub adam_t: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    /// Every random stream is derived from `(seed, name)`, so the seed is
    /// the whole RNG state.
    pub rng_seed: u64,
    pub rng_streams: Vec<String>,
    pub unconverged_steps: usize,
    pub single_group_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: AdamState,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn dir_for(root: &Path, step: usize) -> PathBuf {
        root.join(format!("step_{step}"))
    }

    /// Writes into `dir`, creating it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join("params.bin");
        fs::write(&bin, self.encode_params()).map_err(|e| Error::io(&bin, e))?;
        let meta = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&self.meta)?;
        fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let bin = dir.join("params.bin");
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let entries = decode_entries(&bytes)?;
        let mut params = ParamStore::new();
        let mut adam = AdamState {
            t: meta.adam_t,
            ..AdamState::default()
        };
        for (name, frozen, t) in entries {
            if let Some(n) = name.strip_prefix(M_PREFIX) {
                adam.m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(V_PREFIX) {
                adam.v.insert(n.to_string(), t);
            } else if frozen {
                params.insert_frozen(&name, t);
            } else {
                params.insert(&name, t);
            }
        }
        Ok(Self { params, adam, meta })
    }

    fn encode_params(&self) -> Vec<u8> {
        let mut entries: Vec<(String, bool, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), self.params.is_frozen(n), t))
            .collect();
        for (prefix, map) in [(M_PREFIX, &self.adam.m), (V_PREFIX, &self.adam.v)] {
            entries.extend(map.iter().map(|(n, t)| (format!("{prefix}{n}"), false, t)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, frozen, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(frozen));
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("params.bin is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, bool, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("params.bin has a bad magic header".into()));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let frozen = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = r
            .take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = if rank == 0 {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?
        };
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {name:?}")));
        }
        out.push((name, frozen, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in params.bin".into()));
    }
    Ok(out)
}
