//! JSON checkpoints: configuration, preprocessing tables, parameters and
//! optimizer moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SoftShape};
use crate::params::ParamGroup;
use crate::scalar::Scalar;
use crate::train::{Adam, ModelState, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

/// Everything outside the parameters needed to reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dataset: String,
    pub split_seed: u64,
    pub class_labels: Vec<f64>,
    pub impute_means: Vec<f64>,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub epoch: usize,
    pub meta: CheckpointMeta,
    pub tensors: Vec<Tensor>,
    pub optimizer: Option<OptimizerRecord>,
}

fn widen<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn narrow<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::lit(x)).collect()
}

impl Checkpoint {
    pub fn from_state<S: Scalar>(state: &ModelState<S>, meta: CheckpointMeta) -> Self {
        let tensors = state
            .model
            .params
            .tensors()
            .into_iter()
            .map(|(name, t)| Tensor { name, values: widen(t) })
            .collect();
        let opt = &state.optimizer;
        Self {
            version: CHECKPOINT_VERSION,
            config: state.model.config.clone(),
            epoch: state.epoch,
            meta,
            tensors,
            optimizer: Some(OptimizerRecord {
                step: opt.step,
                first: opt.first.iter().map(|v| widen(v)).collect(),
                second: opt.second.iter().map(|v| widen(v)).collect(),
            }),
        }
    }

    pub fn to_state<S: Scalar>(&self) -> Result<ModelState<S>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut model = SoftShape::<S>::zeros(self.config.clone())?;
        {
            let mut slots = model.params.tensors_mut();
            if slots.len() != self.tensors.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {} tensors, found {}",
                    slots.len(),
                    self.tensors.len()
                )));
            }
            for ((name, slot), t) in slots.iter_mut().zip(&self.tensors) {
                if *name != t.name || slot.len() != t.values.len() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} ({} values) does not fit slot {name} ({} values)",
                        t.name,
                        t.values.len(),
                        slot.len()
                    )));
                }
                for (d, &v) in slot.iter_mut().zip(&t.values) {
                    *d = S::lit(v);
                }
            }
        }
        let mut optimizer = Adam::new(&model.params, self.meta.train_config.lr);
        if let Some(rec) = &self.optimizer {
            let fits = |moments: &[Vec<f64>]| {
                moments.len() == optimizer.first.len()
                    && moments.iter().zip(&optimizer.first).all(|(a, b)| a.len() == b.len())
            };
            if !fits(&rec.first) || !fits(&rec.second) {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
            optimizer.step = rec.step;
            optimizer.first = rec.first.iter().map(|v| narrow(v)).collect();
            optimizer.second = rec.second.iter().map(|v| narrow(v)).collect();
        }
        Ok(ModelState {
            model,
            epoch: self.epoch,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
