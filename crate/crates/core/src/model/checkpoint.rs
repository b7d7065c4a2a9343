//! HRCK checkpoint container.
//!
//! ```text
//! "HRCK" | version u32 | config_len u32 | config text (key=value)
//! step u64 | seed u64 | dropped_steps u64 | tensor count u32
//! per tensor: name_len u32, name, rank u32, dims u64 × rank
//! params, ema, m, v: each the f32 data of every tensor in table order
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::config::ModelConfig;
use super::params::{param_specs, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HRCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub config: ModelConfig,
    /// Optimizer steps taken, including skipped ones.
    pub step: u64,
    /// Root of every counter-based random stream used in training.
    pub seed: u64,
    pub dropped_steps: u64,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl CheckpointBundle {
    /// A fresh bundle: EMA equals the initial weights, moments are zero.
    pub fn initial(config: ModelConfig, params: ParamSet, seed: u64) -> Self {
        let zeros = params.zeros_like();
        CheckpointBundle {
            config,
            step: 0,
            seed,
            dropped_steps: 0,
            ema: params.clone(),
            m: zeros.clone(),
            v: zeros,
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, set) in [
            ("params", &self.params),
            ("ema", &self.ema),
            ("m", &self.m),
            ("v", &self.v),
        ] {
            set.validate(&self.config)
                .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let cfg = self.config.to_text();
        let mut out = Vec::with_capacity(64 + 16 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.dropped_steps.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for set in [&self.params, &self.ema, &self.m, &self.v] {
            for (_, t) in set.iter() {
                for &x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint(
                "bad magic (not an HRCK checkpoint)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = ModelConfig::from_text(text)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let dropped_steps = r.u64()?;
        let count = r.u32()? as usize;
        let specs = param_specs(&config);
        let mut table = Vec::with_capacity(count.min(specs.len()));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has implausible rank {rank}"
                )));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            match specs.iter().find(|s| s.name == name) {
                None => return Err(Error::Checkpoint(format!("unexpected tensor `{name}`"))),
                Some(s) if s.shape != shape => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {shape:?}, model expects {:?}",
                        s.shape
                    )))
                }
                _ => table.push((name, shape)),
            }
        }
        if let Some(s) = specs
            .iter()
            .find(|s| !table.iter().any(|(n, _)| n == &s.name))
        {
            return Err(Error::Checkpoint(format!("missing tensor `{}`", s.name)));
        }
        let mut sets = Vec::with_capacity(4);
        for _ in 0..4 {
            let mut map = std::collections::BTreeMap::new();
            for (name, shape) in &table {
                let n: usize = shape.iter().product();
                let raw = r.take(n * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                map.insert(name.clone(), Tensor::new(shape.clone(), data)?);
            }
            sets.push(ParamSet::from_map(map));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let v = sets.pop().unwrap();
        let m = sets.pop().unwrap();
        let ema = sets.pop().unwrap();
        let params = sets.pop().unwrap();
        Ok(CheckpointBundle {
            config,
            step,
            seed,
            dropped_steps,
            params,
            ema,
            m,
            v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("hrck.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        CheckpointBundle::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: needed {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
