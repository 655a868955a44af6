//! Self-describing JSON checkpoints. Floats are written in shortest
//! round-trip form and parsed back exactly, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::RunningStats;
use super::phenoformer::{PhenoFormer, Standardizer};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "phenoformer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    /// Hybrid running statistics by norm site (t1.norm1, t1.norm2,
    /// t2.norm1, t2.norm2); `None` for standard layer norms.
    pub norm_stats: Vec<Option<RunningStats>>,
    pub batch_norm: Option<BatchNormState>,
    /// Sinusoidal position table, stored so loading never recomputes it.
    pub positions: NamedTensor,
    pub standardizer: Standardizer,
}

impl PhenoFormer {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .params()
            .iter()
            .map(|(_, name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config().clone(),
            params,
            norm_stats: self.layer_norms().iter().map(|ln| ln.stats.clone()).collect(),
            batch_norm: self.batch_norm().map(|bn| BatchNormState {
                running_mean: bn.running_mean.clone(),
                running_var: bn.running_var.clone(),
            }),
            positions: NamedTensor {
                name: "positions".into(),
                shape: self.positions().shape().to_vec(),
                data: self.positions().data().to_vec(),
            },
            standardizer: self.standardizer().clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let mut model = PhenoFormer::new(ck.config, 0)?;
        if ck.params.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params().len(),
                ck.params.len()
            )));
        }
        for p in ck.params {
            let id = model
                .params()
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", p.name)))?;
            if model.params().get(id).shape() != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{}`", p.name)));
            }
            *model.params_mut().get_mut(id) = Tensor::new(p.shape, p.data)?;
        }
        let stats: [Option<RunningStats>; 4] = ck
            .norm_stats
            .try_into()
            .map_err(|_| Error::Checkpoint("expected 4 norm sites".into()))?;
        model.set_running_stats(stats)?;
        match (model.batch_norm_mut(), ck.batch_norm) {
            (Some(bn), Some(state)) => {
                bn.running_mean = state.running_mean;
                bn.running_var = state.running_var;
            }
            (None, None) => {}
            _ => return Err(Error::Checkpoint("batch-norm layout mismatch".into())),
        }
        model.set_positions(Tensor::new(ck.positions.shape, ck.positions.data)?)?;
        model.set_standardizer(ck.standardizer);
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_checkpoint(ck)
    }
}
