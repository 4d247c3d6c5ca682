//! Checkpoint container: JSON manifest plus raw little-endian f64 arrays.
//!
//! Layout: the magic string, a little-endian u64 manifest length, the
//! manifest JSON, then each parameter's values as consecutive LE f64 words
//! in manifest order. Values round-trip bit-exactly.

use super::params::ParameterSet;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8] = b"ADVLENS-CKPT-1\n";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte 0: not an ADVLENS-CKPT-1 file")]
    BadMagic,
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("truncated checkpoint: wanted {wanted} data bytes for {name:?}, got {got}")]
    Truncated { name: String, wanted: usize, got: usize },
    #[error("trailing bytes after parameter data")]
    TrailingBytes,
    #[error("checkpoint kind {got:?}, expected {expected:?}")]
    WrongKind { got: String, expected: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// "model" or "denoiser".
    pub kind: String,
    /// Architecture configuration, echoed verbatim.
    pub config: serde_json::Value,
    /// Numeric-path choices baked into the build (e.g. the GELU form).
    pub op_choices: serde_json::Value,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

pub fn save(
    path: &Path,
    kind: &str,
    config: &serde_json::Value,
    seed: u64,
    params: &ParameterSet,
) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        kind: kind.to_string(),
        config: config.clone(),
        op_choices: crate::op_choices(),
        seed,
        params: params
            .iter()
            .map(|(name, t)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    for (_, tensor) in params.iter() {
        for &v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Manifest, ParameterSet), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut off = MAGIC.len();
    let manifest_len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    if bytes.len() < off + manifest_len {
        return Err(CheckpointError::Truncated {
            name: "<manifest>".into(),
            wanted: manifest_len,
            got: bytes.len() - off,
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[off..off + manifest_len])?;
    off += manifest_len;

    let mut params = ParameterSet::new();
    for entry in &manifest.params {
        let count: usize = entry.shape.iter().product();
        let wanted = count * 8;
        if bytes.len() < off + wanted {
            return Err(CheckpointError::Truncated {
                name: entry.name.clone(),
                wanted,
                got: bytes.len() - off,
            });
        }
        let data: Vec<f64> = bytes[off..off + wanted]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += wanted;
        params.insert(entry.name.clone(), Tensor::from_vec(entry.shape.clone(), data));
    }
    if off != bytes.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok((manifest, params))
}
