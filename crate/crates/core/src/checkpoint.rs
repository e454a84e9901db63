//! Checkpoint files: a JSON sidecar describing every tensor plus a blob of
//! little-endian f64 values in sidecar order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::{ParamStore, Parameter, Tensor};
use crate::training::{EarlyStopState, EpochLog, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "genrel-checkpoint v1";

/// How the trainer's random streams are derived. Every stream is a pure
/// function of `(seed, purpose, epoch, index)`, so the next epoch to run
/// fully describes the generator positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPositions {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: AdamState,
    /// Completed epochs when `params` were recorded.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    pub rng: RngPositions,
    pub early_stop: EarlyStopState,
    pub dataset_sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Slot {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    slot: Slot,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainable: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    config: TrainConfig,
    epoch: usize,
    history: Vec<EpochLog>,
    rng: RngPositions,
    early_stop: EarlyStopState,
    dataset_sha256: String,
    adam_step: u64,
    blob: String,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
}

/// Blob path used for a sidecar at `path`.
pub fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

impl Checkpoint {
    fn layout(&self) -> Vec<(TensorEntry, &Tensor)> {
        let mut out = Vec::new();
        for p in self.params.iter() {
            out.push((
                TensorEntry {
                    name: p.name.clone(),
                    slot: Slot::Param,
                    shape: p.tensor.shape().to_vec(),
                    trainable: Some(p.trainable),
                },
                &p.tensor,
            ));
        }
        for (slot, map) in [(Slot::AdamM, &self.optimizer.m), (Slot::AdamV, &self.optimizer.v)] {
            for (name, t) in map {
                out.push((
                    TensorEntry {
                        name: name.clone(),
                        slot,
                        shape: t.shape().to_vec(),
                        trainable: None,
                    },
                    t,
                ));
            }
        }
        out
    }

    /// Serializes to `(sidecar JSON, blob bytes)`.
    pub fn to_parts(&self, blob_name: &str) -> Result<(String, Vec<u8>)> {
        let layout = self.layout();
        let mut blob = Vec::new();
        for (_, t) in &layout {
            blob.extend(t.to_le_bytes());
        }
        let sidecar = Sidecar {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            rng: self.rng.clone(),
            early_stop: self.early_stop.clone(),
            dataset_sha256: self.dataset_sha256.clone(),
            adam_step: self.optimizer.step,
            blob: blob_name.into(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            tensors: layout.into_iter().map(|(e, _)| e).collect(),
        };
        Ok((serde_json::to_string_pretty(&sidecar)?, blob))
    }

    pub fn from_parts(sidecar: &str, blob: &[u8]) -> Result<Self> {
        let sc: Sidecar = serde_json::from_str(sidecar)?;
        if sc.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format '{}'", sc.format)));
        }
        let digest = hex::encode(Sha256::digest(blob));
        if digest != sc.blob_sha256 {
            return Err(Error::Checkpoint(format!(
                "blob hash {digest} does not match sidecar {}",
                sc.blob_sha256
            )));
        }
        let mut params = ParamStore::new();
        let mut optimizer = AdamState {
            step: sc.adam_step,
            m: Default::default(),
            v: Default::default(),
        };
        let mut offset = 0usize;
        for e in sc.tensors {
            let n: usize = e.shape.iter().product();
            let end = offset + n * 8;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!("blob too short for tensor '{}'", e.name)));
            }
            let data = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            offset = end;
            let t = Tensor::new(e.shape, data)?;
            match e.slot {
                Slot::Param => params.insert(Parameter::new(e.name, t, e.trainable.unwrap_or(true))),
                Slot::AdamM => {
                    optimizer.m.insert(e.name, t);
                }
                Slot::AdamV => {
                    optimizer.v.insert(e.name, t);
                }
            }
        }
        if offset != blob.len() {
            return Err(Error::Checkpoint(format!(
                "blob has {} trailing bytes",
                blob.len() - offset
            )));
        }
        Ok(Self {
            config: sc.config,
            params,
            optimizer,
            epoch: sc.epoch,
            history: sc.history,
            rng: sc.rng,
            early_stop: sc.early_stop,
            dataset_sha256: sc.dataset_sha256,
        })
    }

    /// Writes the sidecar to `path` and the blob next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bp = blob_path(path);
        let name = bp
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?
            .to_string();
        let (json, blob) = self.to_parts(&name)?;
        std::fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sc: Sidecar = serde_json::from_str(&json)?;
        let bp = path.with_file_name(&sc.blob);
        let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        Self::from_parts(&json, &blob)
    }
}
