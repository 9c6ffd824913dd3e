//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "DCX1"
//! input_dim  u32
//! n_arrays   u32
//! per array:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     f64 × Π dims, row-major
//! ```
//!
//! The model configuration is stored next to it as a JSON sidecar
//! (`<checkpoint>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::model::{DeepCoxConfig, DeepCoxModel, PARAM_NAMES};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCX1";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_checkpoint(model: &DeepCoxModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.n_parameters() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(model.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in PARAM_NAMES.iter().zip(&model.params) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        for d in p.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            offset: self.bytes.len() as u64,
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

pub fn decode_checkpoint(bytes: &[u8], config: DeepCoxConfig) -> Result<DeepCoxModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a model checkpoint (bad magic)".into()));
    }
    let input_dim = c.u32()? as usize;
    let n = c.u32()? as usize;
    if n != PARAM_NAMES.len() {
        return Err(Error::Parse(format!("checkpoint holds {n} arrays, expected {}", PARAM_NAMES.len())));
    }
    let mut params = Vec::with_capacity(n);
    for expected in PARAM_NAMES {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| Error::Parse(e.to_string()))?;
        if name != expected {
            return Err(Error::Parse(format!("array {name:?} found where {expected:?} was expected")));
        }
        if c.u32()? != 2 {
            return Err(Error::Parse(format!("array {name:?} is not two-dimensional")));
        }
        let (r, k) = (c.u64()? as usize, c.u64()? as usize);
        let count = r.checked_mul(k).ok_or_else(|| Error::Parse("array too large".into()))?;
        let data = c.take(count.checked_mul(8).ok_or_else(|| Error::Parse("array too large".into()))?)?;
        let values = data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        params.push(Array2::from_shape_vec((r, k), values).expect("length checked"));
    }
    if c.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after checkpoint".into()));
    }
    DeepCoxModel::from_params(input_dim, config, params)
}

pub fn save_checkpoint(model: &DeepCoxModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&model.config)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DeepCoxModel> {
    let side = sidecar_path(path);
    let cfg: DeepCoxConfig =
        serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?, cfg)
}
