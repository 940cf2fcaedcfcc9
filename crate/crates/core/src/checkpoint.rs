//! Single-file checkpoint: magic, manifest length, JSON manifest, raw tensors.
//!
//! ```text
//! b"PDLCKPT\0" | u64 LE manifest length | manifest JSON | f64 LE tensor data
//! ```
//!
//! The manifest lists every tensor with its parameter set, name, shape and
//! offset (in f64 elements) into the data section.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Architecture, ModelError, ModelParams, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PDLCKPT\0";
pub const FORMAT: &str = "pdl-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("architecture hash mismatch: checkpoint {found}, expected {expected}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub set: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub architecture_hash: String,
    pub architecture: Architecture,
    /// Full resolved configuration text.
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ModelParams,
}

const SETS: [&str; 3] = ["F", "M", "D"];

fn sets(params: &ModelParams) -> [&ParamSet; 3] {
    [&params.f, &params.m, &params.d]
}

impl Checkpoint {
    pub fn new(arch: &Architecture, config_text: &str, config_hash: &str, seed: u64, epoch: usize, params: ModelParams) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (set_name, set) in SETS.iter().zip(sets(&params)) {
            for (name, t) in set.iter() {
                tensors.push(TensorEntry {
                    set: set_name.to_string(),
                    name: name.into(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
            }
        }
        Self {
            manifest: Manifest {
                format: FORMAT.into(),
                architecture_hash: arch.hash(),
                architecture: arch.clone(),
                config: config_text.into(),
                config_hash: config_hash.into(),
                seed,
                epoch,
                tensors,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.manifest).expect("serializable");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for set in sets(&self.params) {
            for (_, t) in set.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CheckpointError::Format(m.into());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(CheckpointError::Format(format!("unsupported format {:?}", manifest.format)));
        }
        let data: Vec<f64> = bytes[16 + len..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if (bytes.len() - 16 - len) % 8 != 0 {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let mut out = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
        let mut expected_offset = 0;
        for e in &manifest.tensors {
            let slot = SETS
                .iter()
                .position(|s| *s == e.set)
                .ok_or_else(|| CheckpointError::Format(format!("unknown parameter set {:?}", e.set)))?;
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + n > data.len() {
                return Err(CheckpointError::Format(format!("bad offset for {}", e.name)));
            }
            let t = Tensor::new(&e.shape, data[e.offset..e.offset + n].to_vec())
                .map_err(|err| CheckpointError::Format(err.to_string()))?;
            out[slot].push(e.name.clone(), t)?;
            expected_offset += n;
        }
        if expected_offset != data.len() {
            return Err(bad("trailing tensor data"));
        }
        let [f, m, d] = out;
        Ok(Self {
            manifest,
            params: ModelParams { f, m, d },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored architecture hash equals `arch`'s.
    pub fn check_architecture(&self, arch: &Architecture) -> Result<()> {
        let expected = arch.hash();
        if self.manifest.architecture_hash != expected || self.manifest.architecture.hash() != expected {
            return Err(CheckpointError::ArchitectureMismatch {
                expected,
                found: self.manifest.architecture_hash.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Networks;

    fn arch() -> Architecture {
        Architecture {
            image_size: 8,
            base_width: 2,
            head_hidden: 3,
            depth_size: 2,
            depth_width: 2,
            ..Architecture::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let a = arch();
        let params = Networks::new(&a).unwrap().init(5).unwrap();
        let ck = Checkpoint::new(&a, "seed = 5\n", "abc", 5, 2, params.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.checksum(), params.checksum());
        assert_eq!(back.to_bytes(), ck.to_bytes());
        back.check_architecture(&a).unwrap();
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let a = arch();
        let params = Networks::new(&a).unwrap().init(0).unwrap();
        let ck = Checkpoint::new(&a, "", "", 0, 0, params);
        let other = Architecture { head_hidden: 4, ..a };
        assert!(matches!(
            ck.check_architecture(&other),
            Err(CheckpointError::ArchitectureMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let a = arch();
        let params = Networks::new(&a).unwrap().init(0).unwrap();
        let bytes = Checkpoint::new(&a, "", "", 0, 0, params).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
