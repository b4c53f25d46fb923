//! Versioned little-endian checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "PARNCKPT"
//! version      u32      1
//! digest       32 bytes SHA-256 of ModelConfig::canonical()
//! count        u32      number of records
//! record × count:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   dims       u32 × rank
//!   payload    f32 × prod(dims)
//! checksum     32 bytes SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamKind, ParamStore};

pub const MAGIC: &[u8; 8] = b"PARNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (this build reads version {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        needed: usize,
        offset: usize,
        len: usize,
    },
    #[error("checkpoint checksum mismatch (file corrupted)")]
    ChecksumMismatch,
    #[error(
        "checkpoint was written for a different architecture (digest {found}, expected {expected})"
    )]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint parameter mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint record malformed: {0}")]
    Malformed(String),
}

pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    Sha256::digest(cfg.canonical().as_bytes()).into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize a model to checkpoint bytes.
pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(&model.config));
    let entries = model.params.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                needed: n,
                offset: self.pos,
                len: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parsed checkpoint contents.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub digest: [u8; 32],
    /// `(name, dims, values)` in file order.
    pub records: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Parse and integrity-check checkpoint bytes without interpreting them.
pub fn decode(bytes: &[u8]) -> std::result::Result<RawCheckpoint, CheckpointError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    if bytes.len() < c.pos + 32 + 4 + 32 {
        return Err(CheckpointError::Truncated {
            needed: 32 + 4 + 32,
            offset: c.pos,
            len: bytes.len(),
        });
    }
    // Structure is parsed before the checksum so truncation is reported as such.
    let body_end = bytes.len() - 32;
    let mut c = Cursor {
        buf: &bytes[..body_end],
        pos: c.pos,
    };
    let digest: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: dims {dims:?} overflow")))?;
        let payload = c.take(n * 4)?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push((name, dims, values));
    }
    if c.pos != body_end {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the last record",
            body_end - c.pos
        )));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(CheckpointError::ChecksumMismatch);
    }
    Ok(RawCheckpoint { digest, records })
}

fn kind_of(name: &str) -> ParamKind {
    if name.ends_with(".running_mean") || name.ends_with(".running_var") {
        ParamKind::Buffer
    } else {
        ParamKind::Trainable
    }
}

/// Rebuild a model from checkpoint bytes, requiring `cfg`'s architecture.
pub fn decode_model(bytes: &[u8], cfg: &ModelConfig) -> Result<Model<f32>> {
    let raw = decode(bytes)?;
    let expected = config_digest(cfg);
    if raw.digest != expected {
        return Err(CheckpointError::ConfigMismatch {
            expected: hex(&expected),
            found: hex(&raw.digest),
        }
        .into());
    }
    let mut store = ParamStore::new();
    for (name, dims, values) in raw.records {
        store
            .insert(&name, &dims, values, kind_of(&name))
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
    }
    Model::from_params(cfg.clone(), store)
        .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()).into())
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, cfg)
}
