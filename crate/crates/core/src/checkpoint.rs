//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "FNN1"
//! version u32      currently 1
//! dims    7 x u64  d_in, d_h, layers, h1, h2, parts, n_families
//! shared  u8       0 or 1 (forest weight sharing)
//! hash    32 bytes SHA-256 of the canonical configuration string
//! count   u64      number of f64 parameter values
//! params  count x f64, in the documented parameter-layout order
//! ```
//!
//! Writes are fully deterministic: the same parameters and configuration
//! produce the same bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::model::{FnnParams, ModelDims, ModelError};

pub const MAGIC: &[u8; 4] = b"FNN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint was written under a different configuration")]
    ConfigMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// SHA-256 of the configuration's canonical one-line rendering.
pub fn config_hash(cfg: &RunConfig) -> [u8; 32] {
    let digest = Sha256::digest(cfg.canonical_string().as_bytes());
    digest.into()
}

/// Hex rendering of a config hash, as reported in run summaries.
pub fn config_hash_hex(cfg: &RunConfig) -> String {
    config_hash(cfg).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes parameters plus the config fingerprint.
pub fn checkpoint_bytes(params: &FnnParams, cfg: &RunConfig) -> Vec<u8> {
    let dims = params.dims();
    let flat = params.flatten();
    let mut out = Vec::with_capacity(4 + 4 + 7 * 8 + 1 + 32 + 8 + flat.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [dims.d_in, dims.d_h, dims.layers, dims.h1, dims.h2, dims.parts, dims.n_families] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.push(u8::from(dims.share_params));
    out.extend_from_slice(&config_hash(cfg));
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in &flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(path: &Path, params: &FnnParams, cfg: &RunConfig) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_bytes(params, cfg))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated at byte {} (need {n} more of {})",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("size {v} overflows")))
    }
}

/// Deserializes a checkpoint, returning the parameters and the stored
/// configuration hash (callers decide whether a mismatch matters).
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(FnnParams, [u8; 32]), CheckpointError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let d_in = r.usize()?;
    let d_h = r.usize()?;
    let layers = r.usize()?;
    let h1 = r.usize()?;
    let h2 = r.usize()?;
    let parts = r.usize()?;
    let n_families = r.usize()?;
    let shared = match r.take(1)?[0] {
        0 => false,
        1 => true,
        other => return Err(CheckpointError::Corrupt(format!("share flag byte {other}"))),
    };
    let mut hash = [0u8; 32];
    hash.copy_from_slice(r.take(32)?);
    let count = r.usize()?;
    let dims = ModelDims { d_in, d_h, layers, h1, h2, parts, n_families, share_params: shared };
    let mut flat = Vec::with_capacity(count);
    for _ in 0..count {
        flat.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.at
        )));
    }
    let params = FnnParams::from_flat(dims, &flat)?;
    Ok((params, hash))
}

pub fn load_checkpoint(path: &Path) -> Result<(FnnParams, [u8; 32]), CheckpointError> {
    parse_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and insists it was written under `cfg`.
pub fn load_checkpoint_for(path: &Path, cfg: &RunConfig) -> Result<FnnParams, CheckpointError> {
    let (params, hash) = load_checkpoint(path)?;
    if hash != config_hash(cfg) {
        return Err(CheckpointError::ConfigMismatch);
    }
    Ok(params)
}
