//! Binary checkpoint files.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ICAFCKPT"
//! 8       4     format version, u32 LE
//! 12      8     payload length in bytes, u64 LE
//! 20      32    SHA-256 of the payload
//! 52      ...   payload
//! ```
//!
//! The payload is a u64 LE manifest length, the manifest as UTF-8 JSON, then
//! the raw f64 LE values of every tensor listed in the manifest, in order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::training::TrainConfig;

use super::ModelConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ICAFCKPT";
const HEADER_LEN: usize = 8 + 4 + 8 + 32;

/// Adam state in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub lr: f64,
    pub best_dev: Option<f64>,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub params: ParamStore,
    pub optimizer: OptimizerSnapshot,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerManifest {
    step: u64,
    lr: f64,
    best_dev: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    seed: u64,
    vocab: Vec<String>,
    optimizer: OptimizerManifest,
    tensors: Vec<TensorEntry>,
}

const ROLE_PARAM: &str = "param";
const ROLE_M: &str = "adam_m";
const ROLE_V: &str = "adam_v";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.len();
        if self.optimizer.first_moment.len() != n || self.optimizer.second_moment.len() != n {
            return Err(Error::shape(format!(
                "optimizer holds {}/{} moment tensors for {n} parameters",
                self.optimizer.first_moment.len(),
                self.optimizer.second_moment.len()
            )));
        }
        let mut tensors = Vec::with_capacity(3 * n);
        let mut blocks: Vec<&Tensor> = Vec::with_capacity(3 * n);
        for (role, list) in [
            (
                ROLE_PARAM,
                self.params.iter().map(|p| &p.value).collect::<Vec<_>>(),
            ),
            (ROLE_M, self.optimizer.first_moment.iter().collect()),
            (ROLE_V, self.optimizer.second_moment.iter().collect()),
        ] {
            for (p, t) in self.params.iter().zip(list) {
                if p.value.shape() != t.shape() {
                    return Err(Error::shape(format!(
                        "{role} tensor for {} has wrong shape",
                        p.name
                    )));
                }
                tensors.push(TensorEntry {
                    name: p.name.clone(),
                    role: role.to_string(),
                    shape: t.shape().to_vec(),
                });
                blocks.push(t);
            }
        }
        let manifest = Manifest {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            seed: self.seed,
            vocab: self.vocab.clone(),
            optimizer: OptimizerManifest {
                step: self.optimizer.step,
                lr: self.optimizer.lr,
                best_dev: self.optimizer.best_dev,
            },
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut payload = Vec::new();
        payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
        payload.extend_from_slice(&json);
        for t in blocks {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                return Err(Error::Format("not a checkpoint file".into()));
            }
            return Err(Error::Integrity(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(Error::Integrity(format!(
                "payload is {} bytes, header says {len}",
                payload.len()
            )));
        }
        if Sha256::digest(payload).as_slice() != &bytes[20..52] {
            return Err(Error::Integrity("payload checksum mismatch".into()));
        }

        let bad = |m: &str| Error::Format(format!("checkpoint payload: {m}"));
        if payload.len() < 8 {
            return Err(bad("missing manifest length"));
        }
        let mlen = u64::from_le_bytes(payload[..8].try_into().expect("8 bytes")) as usize;
        let body = &payload[8..];
        if body.len() < mlen {
            return Err(bad("manifest runs past the payload"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| bad(&e.to_string()))?;
        let mut values = &body[mlen..];

        let mut params = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for entry in &manifest.tensors {
            let numel: usize = entry.shape.iter().product();
            if values.len() < numel * 8 {
                return Err(bad(&format!("tensor {} is truncated", entry.name)));
            }
            let data = values[..numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            values = &values[numel * 8..];
            let t = Tensor::new(entry.shape.clone(), data)?;
            match entry.role.as_str() {
                ROLE_PARAM => {
                    params.insert(entry.name.clone(), t)?;
                }
                ROLE_M => first.push(t),
                ROLE_V => second.push(t),
                other => return Err(bad(&format!("unknown tensor role {other}"))),
            }
        }
        if !values.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        if first.len() != params.len() || second.len() != params.len() {
            return Err(bad("optimizer moments do not match the parameters"));
        }
        Ok(Self {
            model_config: manifest.model_config,
            train_config: manifest.train_config,
            epoch: manifest.epoch,
            seed: manifest.seed,
            vocab: manifest.vocab,
            params,
            optimizer: OptimizerSnapshot {
                step: manifest.optimizer.step,
                lr: manifest.optimizer.lr,
                best_dev: manifest.optimizer.best_dev,
                first_moment: first,
                second_moment: second,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
