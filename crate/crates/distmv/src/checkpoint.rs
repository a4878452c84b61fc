//! Ritz-pair checkpointing: the current best eigenvector and its Hamiltonian
//! image plus a small metadata record, enough to restart the Davidson loop at
//! subspace size one.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config hash mismatch: checkpoint has {found}, run expects {expected}")]
    ConfigMismatch { found: String, expected: String },
    #[error("vector length {got} does not match the shard ({expected})")]
    Length { expected: u64, got: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub energy: f64,
    pub residual: f64,
    pub matvec_iter: u64,
    pub n_det: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct RitzCheckpoint {
    pub vhat: Vec<f64>,
    pub hvhat: Vec<f64>,
    pub meta: CheckpointMeta,
}

fn factory_dir(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("factory{index}"))
}

fn write_vector(path: &Path, v: &[f64]) -> Result<(), CheckpointError> {
    let wrap = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(wrap)?;
        let mut buf = Vec::with_capacity(8 + v.len() * 8);
        buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        f.write_all(&buf).map_err(wrap)?;
        f.sync_data().map_err(wrap)?;
    }
    std::fs::rename(&tmp, path).map_err(wrap)
}

fn read_vector(path: &Path) -> Result<Vec<f64>, CheckpointError> {
    let wrap = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::open(path).map_err(wrap)?;
    let mut hdr = [0u8; 8];
    f.read_exact(&mut hdr).map_err(wrap)?;
    let len = u64::from_le_bytes(hdr) as usize;
    let mut buf = vec![0u8; len * 8];
    f.read_exact(&mut buf).map_err(|_| {
        CheckpointError::Malformed(format!(
            "{}: payload shorter than the stored length {len}",
            path.display()
        ))
    })?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Durably write one factory's shard of the Ritz pair, via temp-file rename
/// so a torn write never shadows a good checkpoint.
pub fn checkpoint_write(
    dir: &Path,
    index: usize,
    ckpt: &RitzCheckpoint,
) -> Result<(), CheckpointError> {
    let fdir = factory_dir(dir, index);
    std::fs::create_dir_all(&fdir).map_err(|source| CheckpointError::Io {
        path: fdir.display().to_string(),
        source,
    })?;
    write_vector(&fdir.join("vhat.bin"), &ckpt.vhat)?;
    write_vector(&fdir.join("hvhat.bin"), &ckpt.hvhat)?;
    let meta_path = fdir.join("meta.json");
    let tmp = meta_path.with_extension("tmp");
    let body = serde_json::to_vec_pretty(&ckpt.meta)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    std::fs::write(&tmp, body).map_err(|source| CheckpointError::Io {
        path: tmp.display().to_string(),
        source,
    })?;
    std::fs::rename(&tmp, &meta_path).map_err(|source| CheckpointError::Io {
        path: meta_path.display().to_string(),
        source,
    })
}

/// Load one factory's shard, refusing a checkpoint whose config hash does not
/// match the resuming run.
pub fn checkpoint_resume(
    dir: &Path,
    index: usize,
    expected_hash: &str,
    expected_len: u64,
) -> Result<RitzCheckpoint, CheckpointError> {
    let fdir = factory_dir(dir, index);
    let meta_path = fdir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|source| CheckpointError::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if meta.config_hash != expected_hash {
        return Err(CheckpointError::ConfigMismatch {
            found: meta.config_hash,
            expected: expected_hash.to_string(),
        });
    }
    let vhat = read_vector(&fdir.join("vhat.bin"))?;
    let hvhat = read_vector(&fdir.join("hvhat.bin"))?;
    if vhat.len() as u64 != expected_len || hvhat.len() as u64 != expected_len {
        return Err(CheckpointError::Length {
            expected: expected_len,
            got: vhat.len() as u64,
        });
    }
    Ok(RitzCheckpoint { vhat, hvhat, meta })
}

pub fn checkpoint_exists(dir: &Path, index: usize) -> bool {
    factory_dir(dir, index).join("meta.json").is_file()
}

/// Read just the metadata, without the vectors.
pub fn read_meta(dir: &Path, index: usize) -> Result<CheckpointMeta, CheckpointError> {
    let meta_path = factory_dir(dir, index).join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|source| CheckpointError::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ckpt-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn write_resume_round_trip() {
        let dir = tmpdir("rt");
        let ckpt = RitzCheckpoint {
            vhat: vec![0.5, -0.5, 0.5, -0.5],
            hvhat: vec![1.0, -1.0, 1.0, -1.0],
            meta: CheckpointMeta {
                energy: 2.0,
                residual: 1e-6,
                matvec_iter: 12,
                n_det: 4,
                config_hash: "abc".into(),
            },
        };
        checkpoint_write(&dir, 0, &ckpt).unwrap();
        assert!(checkpoint_exists(&dir, 0));
        let back = checkpoint_resume(&dir, 0, "abc", 4).unwrap();
        assert_eq!(back.vhat, ckpt.vhat);
        assert_eq!(back.hvhat, ckpt.hvhat);
        assert_eq!(back.meta, ckpt.meta);
        // the stored energy is the Rayleigh quotient of the stored pair
        let num: f64 = back.vhat.iter().zip(&back.hvhat).map(|(a, b)| a * b).sum();
        let den: f64 = back.vhat.iter().map(|a| a * a).sum();
        assert!((num / den - back.meta.energy).abs() < 1e-12);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn mismatched_hash_refused() {
        let dir = tmpdir("hash");
        let ckpt = RitzCheckpoint {
            vhat: vec![1.0],
            hvhat: vec![2.0],
            meta: CheckpointMeta {
                energy: 2.0,
                residual: 0.0,
                matvec_iter: 1,
                n_det: 1,
                config_hash: "old-config".into(),
            },
        };
        checkpoint_write(&dir, 0, &ckpt).unwrap();
        assert!(matches!(
            checkpoint_resume(&dir, 0, "new-config", 1),
            Err(CheckpointError::ConfigMismatch { .. })
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
