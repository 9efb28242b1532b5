//! Versioned checkpoint files.
//!
//! Layout: `PTDC`, u32 version, u32 entry count, then per entry a u16 name
//! length, the UTF-8 name, a u8 rank, u32 dims and f32 little-endian data.
//! Parameters are stored as `param/<name>` and the Adam moments as
//! `adam.m/<name>` and `adam.v/<name>`. A trailing u32-length-prefixed
//! UTF-8 block of `key=value` lines holds the training settings, the
//! architecture (`arch.` prefix) and the optimizer step.

use std::fs;
use std::path::Path;

use crate::error::{file_err, PtdError, Result};
use crate::formats::{put_f32s, ByteReader};
use crate::networks::{ArchConfig, ParamStore};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTDC";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub opt: AdamState,
    pub cfg: TrainConfig,
    pub arch: ArchConfig,
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| PtdError::Format(format!("name too long: {}", name)))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(t.shape().len()).map_err(|_| PtdError::Format(format!("{}: rank too large", name)))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| PtdError::Format(format!("{}: dim too large", name)))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    put_f32s(out, t.data());
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push((format!("{}{}", PARAM_PREFIX, name), t));
        }
        for (name, t) in &self.opt.m {
            entries.push((format!("{}{}", M_PREFIX, name), t));
        }
        for (name, t) in &self.opt.v {
            entries.push((format!("{}{}", V_PREFIX, name), t));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            put_entry(&mut out, name, t)?;
        }
        let mut text = String::new();
        for (k, v) in self.cfg.to_pairs() {
            text.push_str(&format!("{}={}\n", k, v));
        }
        for (k, v) in self.arch.to_pairs() {
            text.push_str(&format!("arch.{}={}\n", k, v));
        }
        text.push_str(&format!("adam_step={}\n", self.opt.step));
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut opt = AdamState::default();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| PtdError::Format("checkpoint: entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| PtdError::Format(format!("checkpoint: {} shape overflows", name)))?;
            let data = r.f32s(n)?;
            let t = Tensor::from_vec(shape, data)
                .map_err(|e| PtdError::Format(format!("checkpoint: entry {}: {}", name, e)))?;
            if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
                params.insert(p, t)?;
            } else if let Some(p) = name.strip_prefix(M_PREFIX) {
                opt.m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                opt.v.insert(p.to_string(), t);
            } else {
                return Err(PtdError::Format(format!("checkpoint: unknown entry {}", name)));
            }
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| PtdError::Format("checkpoint: config block is not UTF-8".into()))?;
        r.finish()?;

        let mut cfg_pairs = Vec::new();
        let mut arch = ArchConfig::default();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PtdError::Format(format!("checkpoint: bad config line {:?}", line)))?;
            if let Some(ak) = k.strip_prefix("arch.") {
                arch.set(ak, v)?;
            } else if k == "adam_step" {
                opt.step = v
                    .parse()
                    .map_err(|_| PtdError::Format(format!("checkpoint: bad adam_step {:?}", v)))?;
            } else {
                cfg_pairs.push((k, v));
            }
        }
        let cfg = TrainConfig::from_pairs(cfg_pairs)?;
        arch.validate()?;
        params.check_arch(&arch)?;
        Ok(Self { params, opt, cfg, arch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write to a sibling then rename so a crash never leaves half a file
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?).map_err(file_err(&tmp))?;
        fs::rename(&tmp, path).map_err(file_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(file_err(path))?)
    }
}
