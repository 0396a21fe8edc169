//! Self-describing checkpoint container.
//!
//! A checkpoint is a versioned JSON document holding named `f64` tensors, an
//! architecture tag, the hash of the config it was produced under and the
//! training seed. JSON round-trips `f64` exactly (shortest-roundtrip
//! formatting), so save/load is lossless.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub arch: String,
    pub config_hash: String,
    pub seed: u64,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn new(kind: &str, arch: &str, config_hash: &str, seed: u64) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: kind.into(),
            arch: arch.into(),
            config_hash: config_hash.into(),
            seed,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: &str, arr: &ArrayD<f64>) {
        self.tensors.insert(
            name.into(),
            TensorData {
                shape: arr.shape().to_vec(),
                data: arr.iter().copied().collect(),
            },
        );
    }

    pub fn take(&self, name: &str) -> Result<ArrayD<f64>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))
    }

    pub fn take_1d(&self, name: &str) -> Result<Array1<f64>> {
        self.take(name)?
            .into_dimensionality()
            .map_err(|e| Error::Checkpoint(format!("tensor {name} not 1-D: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}
