//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "GMOE"
//! version u32      currently 1
//! digest  32 bytes sha256 of the config JSON
//! cfg_len u32      length of the config JSON
//! config  cfg_len  UTF-8 JSON (the model's structural config)
//! count   u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8), dtype u8 (0 = f32, 1 = f64), rank u8,
//!   dims rank x u64, payload numel x 4/8 bytes (IEEE-754 LE)
//! ```
//!
//! The magic is validated before any length field is trusted, so corrupted
//! files are rejected before any payload-sized allocation.

use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GMOE";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("config digest mismatch")]
    DigestMismatch,
    #[error("dtype code {got} does not match expected {want}")]
    DtypeMismatch { got: u8, want: u8 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Model(String),
}

/// Serialize named tensors plus their structural config.
pub fn write_bytes<S: Scalar>(config_json: &str, tensors: &BTreeMap<String, Tensor<S>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let digest = Sha256::digest(config_json.as_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE_CODE);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

/// Parse a checkpoint: returns the config JSON and the tensor table.
pub fn read_bytes<S: Scalar>(
    bytes: &[u8],
) -> Result<(String, BTreeMap<String, Tensor<S>>), CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    // magic first: nothing else is trusted until it matches
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let cfg_len = r.u32()? as usize;
    let config_json = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|e| CheckpointError::Corrupt(format!("config not UTF-8: {e}")))?
        .to_string();
    let expect: [u8; 32] = Sha256::digest(config_json.as_bytes()).into();
    if digest != expect {
        return Err(CheckpointError::DigestMismatch);
    }

    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("name not UTF-8: {e}")))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != S::DTYPE_CODE {
            return Err(CheckpointError::DtypeMismatch {
                got: dtype,
                want: S::DTYPE_CODE,
            });
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * S::BYTES)?;
        let data: Vec<S> = payload.chunks_exact(S::BYTES).map(S::read_le).collect();
        let t =
            Tensor::from_vec(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        tensors.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((config_json, tensors))
}

pub fn save_model<S: Scalar>(model: &Model<S>, path: &Path) -> Result<(), CheckpointError> {
    let config_json = serde_json::to_string_pretty(&model.cfg)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let bytes = write_bytes(&config_json, &model.named_tensors());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<Model<S>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let (config_json, tensors) = read_bytes::<S>(&bytes)?;
    let cfg: ModelConfig =
        serde_json::from_str(&config_json).map_err(|e| CheckpointError::Config(e.to_string()))?;
    Model::from_tensors(cfg, tensors).map_err(|e| CheckpointError::Model(e.to_string()))
}
