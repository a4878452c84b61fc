//! Out-of-core Krylov storage: append-only binary files holding the sequence
//! of basis vectors and their images, scanned sequentially for dot products.
//!
//! Vector layers use the common on-disk layout: an 8-byte little-endian
//! element count followed by the raw f64 payload. All layers of one store
//! share a length, so layer offsets are computed, not indexed.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OocError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("layer {layer} out of range ({layers} stored)")]
    LayerRange { layer: usize, layers: usize },
    #[error("length mismatch: store holds vectors of {expected} elements, got {got}")]
    Length { expected: u64, got: u64 },
    #[error("integrity failure reading {path}: stored length {stored}, file holds {actual}")]
    ShortRead {
        path: String,
        stored: u64,
        actual: u64,
    },
}

/// One append-only vector sequence on disk.
pub struct OocStore {
    path: PathBuf,
    len: u64,
    layers: usize,
}

const HEADER: u64 = 8;

impl OocStore {
    /// Open or create the store at `path` for vectors of `len` elements.
    /// Existing contents are validated and kept.
    pub fn open(path: &Path, len: u64) -> Result<Self, OocError> {
        let wrap = |source| OocError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(wrap)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(path)
            .map_err(wrap)?;
        let size = file.metadata().map_err(wrap)?.len();
        let layer_bytes = HEADER + len * 8;
        if size % layer_bytes != 0 {
            return Err(OocError::ShortRead {
                path: path.display().to_string(),
                stored: layer_bytes,
                actual: size,
            });
        }
        Ok(OocStore {
            path: path.to_path_buf(),
            len,
            layers: (size / layer_bytes) as usize,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn vector_len(&self) -> u64 {
        self.len
    }

    pub fn append(&mut self, v: &[f64]) -> Result<(), OocError> {
        if v.len() as u64 != self.len {
            return Err(OocError::Length {
                expected: self.len,
                got: v.len() as u64,
            });
        }
        let wrap = |source| OocError::Io {
            path: self.path.display().to_string(),
            source,
        };
        let mut file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(wrap)?;
        let mut buf = Vec::with_capacity(8 + v.len() * 8);
        buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        file.write_all(&buf).map_err(wrap)?;
        file.sync_data().map_err(wrap)?;
        self.layers += 1;
        Ok(())
    }

    fn open_at(&self, layer: usize) -> Result<File, OocError> {
        let wrap = |source| OocError::Io {
            path: self.path.display().to_string(),
            source,
        };
        if layer >= self.layers {
            return Err(OocError::LayerRange {
                layer,
                layers: self.layers,
            });
        }
        let mut file = File::open(&self.path).map_err(wrap)?;
        let offset = layer as u64 * (HEADER + self.len * 8);
        file.seek(SeekFrom::Start(offset)).map_err(wrap)?;
        let mut hdr = [0u8; 8];
        file.read_exact(&mut hdr).map_err(wrap)?;
        let stored = u64::from_le_bytes(hdr);
        if stored != self.len {
            return Err(OocError::ShortRead {
                path: self.path.display().to_string(),
                stored,
                actual: self.len,
            });
        }
        Ok(file)
    }

    pub fn read(&self, layer: usize) -> Result<Vec<f64>, OocError> {
        let wrap = |source| OocError::Io {
            path: self.path.display().to_string(),
            source,
        };
        let mut file = self.open_at(layer)?;
        let mut buf = vec![0u8; (self.len * 8) as usize];
        file.read_exact(&mut buf).map_err(wrap)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Dot product of a stored layer against an in-memory vector by
    /// sequential chunked scanning; the layer is never fully materialized.
    pub fn scan_dot(&self, layer: usize, other: &[f64]) -> Result<f64, OocError> {
        if other.len() as u64 != self.len {
            return Err(OocError::Length {
                expected: self.len,
                got: other.len() as u64,
            });
        }
        let wrap = |source| OocError::Io {
            path: self.path.display().to_string(),
            source,
        };
        let mut file = self.open_at(layer)?;
        const CHUNK: usize = 1 << 16;
        let mut acc = 0.0;
        let mut done = 0usize;
        let mut buf = vec![0u8; CHUNK * 8];
        while done < other.len() {
            let take = CHUNK.min(other.len() - done);
            file.read_exact(&mut buf[..take * 8]).map_err(wrap)?;
            for (k, c) in buf[..take * 8].chunks_exact(8).enumerate() {
                acc += f64::from_le_bytes(c.try_into().unwrap()) * other[done + k];
            }
            done += take;
        }
        Ok(acc)
    }

    /// Drop every layer beyond the first `keep` (the subspace restart).
    pub fn truncate_to(&mut self, keep: usize) -> Result<(), OocError> {
        let wrap = |source| OocError::Io {
            path: self.path.display().to_string(),
            source,
        };
        let keep = keep.min(self.layers);
        let bytes = keep as u64 * (HEADER + self.len * 8);
        let file = OpenOptions::new()
            .write(true)
            .open(&self.path)
            .map_err(wrap)?;
        file.set_len(bytes).map_err(wrap)?;
        file.sync_data().map_err(wrap)?;
        self.layers = keep;
        Ok(())
    }

    /// Total bytes on disk.
    pub fn footprint(&self) -> u64 {
        self.layers as u64 * (HEADER + self.len * 8)
    }
}
