//! Checkpoint file: magic `SRC1`, a little-endian `u32` header length, a UTF-8
//! JSON header, then the parameters as little-endian `f32` in layout order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Model, ModelConfig, TrainedModel};

const MAGIC: &[u8; 4] = b"SRC1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A training snapshot. Parameters are held at `f32` precision so that a
/// save/load round trip reproduces the value exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Vec<f64>,
    pub best_acc: f64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    train: TrainConfig,
    loss: LossWeights,
    best_acc: f64,
    epoch: usize,
    rng: ChaCha8Rng,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

fn tensors(model: &Model) -> Vec<TensorMeta> {
    model
        .layout()
        .entries()
        .iter()
        .map(|e| TensorMeta {
            name: e.name.clone(),
            shape: e.shape.clone(),
        })
        .collect()
}

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(model_config: ModelConfig, train: TrainConfig, model: &Model, params: &[f64], best_acc: f64, epoch: usize, rng: ChaCha8Rng) -> Self {
        assert_eq!(params.len(), model.num_params(), "parameter vector does not match the model");
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: model_config,
            train,
            params: params.iter().map(|&v| v as f32 as f64).collect(),
            best_acc,
            epoch,
            rng,
        }
    }

    /// Rebuilds the model (with the run's ablations) around the stored weights.
    pub fn trained(&self) -> Result<TrainedModel> {
        let model = Model::new(self.model.clone(), self.train.ablations)?;
        if model.num_params() != self.params.len() {
            return Err(format(format!(
                "checkpoint holds {} parameters, its model config needs {}",
                self.params.len(),
                model.num_params()
            )));
        }
        Ok(TrainedModel {
            model,
            params: self.params.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = Model::new(self.model.clone(), self.train.ablations)?;
        let header = Header {
            version: self.version,
            dtype: "f32le".into(),
            model: self.model.clone(),
            train: self.train.clone(),
            loss: self.train.loss.clone(),
            best_acc: self.best_acc,
            epoch: self.epoch,
            rng: self.rng.clone(),
            tensors: tensors(&model),
        };
        let json = serde_json::to_vec(&header).map_err(|e| format(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for &v in &self.params {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(format("not a checkpoint file (missing SRC1 magic)"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| format("file ends inside the header"))?;
        let h: Header = serde_json::from_slice(body).map_err(|e| format(format!("bad checkpoint header: {e}")))?;
        if h.version != CHECKPOINT_VERSION || h.dtype != "f32le" {
            return Err(format(format!(
                "unsupported checkpoint version {} / dtype {} (expected {CHECKPOINT_VERSION} / f32le)",
                h.version, h.dtype
            )));
        }
        let mut train = h.train;
        train.loss = h.loss;
        let model = Model::new(h.model.clone(), train.ablations).map_err(|e| format(format!("checkpoint model config invalid: {e}")))?;
        if h.tensors != tensors(&model) {
            return Err(format("tensor table does not match the parameter layout of the stored model config"));
        }
        let data = &bytes[8 + hlen..];
        if data.len() != 4 * model.num_params() {
            return Err(format(format!(
                "payload has {} bytes, layout requires {} (truncated or padded file)",
                data.len(),
                4 * model.num_params()
            )));
        }
        let params: Vec<f64> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(format("non-finite parameter in checkpoint"));
        }
        Ok(Checkpoint {
            version: h.version,
            model: h.model,
            train,
            params,
            best_acc: h.best_acc,
            epoch: h.epoch,
            rng: h.rng,
        })
    }
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    crate::atomic_write(path.as_ref(), &c.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
