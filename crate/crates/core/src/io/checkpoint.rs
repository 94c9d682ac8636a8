use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_table, join_container, split_container, FormatError, TableEntry};
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::{ParamGroup, Tensor};

pub const CHECKPOINT_MAGIC: &str = "SSVPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the generators at the end of training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    /// `(stream, word position)` per generator.
    pub streams: Vec<(u64, u128)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub tensors: Vec<CheckpointTensor>,
    pub rng: RngSnapshot,
    /// Loss history file, relative to the checkpoint's directory.
    pub history: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    group: ParamGroup,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    train_config: TrainConfig,
    model_config: ModelConfig,
    tensors: Vec<HeaderTensor>,
    rng: RngSnapshot,
    history: Option<String>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: &TrainConfig, rng: RngSnapshot, history: Option<String>) -> Self {
        let tensors = model
            .store
            .entries()
            .iter()
            .map(|e| CheckpointTensor { name: e.name.clone(), group: e.group, trainable: e.trainable, value: e.value.clone() })
            .collect();
        Self { train: train.clone(), model: model.config.clone(), tensors, rng, history }
    }

    /// Rebuilds the model. Every stored tensor must match the shape the
    /// configuration implies.
    pub fn to_model(&self) -> Result<Model> {
        let fresh = Model::new(self.model.clone(), self.train.seed)?;
        for t in &self.tensors {
            if let Some(id) = fresh.store.id(&t.name) {
                let expected = fresh.store.value(id).shape();
                if expected != t.value.shape() {
                    return Err(FormatError::DimsMismatch {
                        name: t.name.clone(),
                        expected: expected.to_vec(),
                        found: t.value.shape().to_vec(),
                    }
                    .into());
                }
            }
        }
        let named: Vec<(String, Tensor)> = self.tensors.iter().map(|t| (t.name.clone(), t.value.clone())).collect();
        let mut model = Model::from_named(self.model.clone(), self.train.seed, &named)?;
        for t in &self.tensors {
            let id = model.store.id(&t.name).expect("installed above");
            model.store.set_trainable(id, t.trainable);
        }
        Ok(model)
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(c.tensors.len());
    for t in &c.tensors {
        tensors.push(HeaderTensor {
            name: t.name.clone(),
            shape: t.value.shape().to_vec(),
            offset: payload.len(),
            group: t.group,
            trainable: t.trainable,
        });
        for v in t.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        train_config: c.train.clone(),
        model_config: c.model.clone(),
        tensors,
        rng: c.rng.clone(),
        history: c.history.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    Ok(join_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = split_container(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let header: Header = serde_json::from_slice(header).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    let table: Vec<TableEntry> = header
        .tensors
        .iter()
        .map(|t| TableEntry { name: t.name.clone(), shape: t.shape.clone(), offset: t.offset })
        .collect();
    check_table(&table, payload.len(), 8)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let (r, c) = match t.shape[..] {
            [r, c] => (r, c),
            _ => return Err(FormatError::BadHeader(format!("`{}` is not a matrix", t.name)).into()),
        };
        let data = payload[t.offset..t.offset + 8 * r * c]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push(CheckpointTensor { name: t.name, group: t.group, trainable: t.trainable, value: Tensor::new(r, c, data)? });
    }
    Ok(Checkpoint { train: header.train_config, model: header.model_config, tensors, rng: header.rng, history: header.history })
}

pub fn write_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(c)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
