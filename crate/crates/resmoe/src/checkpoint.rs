//! Binary checkpoints. All numeric state is stored as f64 so both training
//! precisions round-trip losslessly (f32 -> f64 -> f32 is exact).

use std::path::Path;

use resmoe_core::constraints::ImportanceTracker;
use resmoe_core::model::Model;
use resmoe_core::optim::{Adam, AdamConfig};
use resmoe_core::scalar::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnRecord {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub epoch: usize,
    pub step: u64,
    pub params: Vec<ParamRecord>,
    pub bn: Vec<BnRecord>,
    pub adam: Option<AdamRecord>,
    pub tracker: Option<ImportanceTracker>,
}

/// Hash of the canonical TOML form of the config; ties a checkpoint to the
/// run that produced it.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_toml().as_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn capture<S: Scalar>(
        cfg: &RunConfig,
        model: &Model<S>,
        adam: Option<&Adam<S>>,
        tracker: Option<&ImportanceTracker>,
        epoch: usize,
        step: u64,
    ) -> Self {
        let params = model
            .params
            .tensors
            .iter()
            .map(|t| ParamRecord {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: t.data.iter().map(|v| v.to_f64()).collect(),
            })
            .collect();
        let bn = model
            .bn_states
            .iter()
            .map(|s| BnRecord {
                mean: s.mean.iter().map(|v| v.to_f64()).collect(),
                var: s.var.iter().map(|v| v.to_f64()).collect(),
            })
            .collect();
        let adam = adam.map(|a| AdamRecord {
            config: a.config,
            step_count: a.step_count,
            m: a.m.iter().map(|t| t.iter().map(|v| v.to_f64()).collect()).collect(),
            v: a.v.iter().map(|t| t.iter().map(|v| v.to_f64()).collect()).collect(),
        });
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: config_hash(cfg),
            epoch,
            step,
            params,
            bn,
            adam,
            tracker: tracker.cloned(),
        }
    }

    /// Rebuild model and optimizer in precision `S`. The model skeleton
    /// comes from the config; stored tensors must match it shape-for-shape.
    pub fn restore<S: Scalar>(
        &self,
        cfg: &RunConfig,
    ) -> Result<(Model<S>, Option<Adam<S>>, Option<ImportanceTracker>)> {
        let mc = cfg.model_config()?;
        let mut model: Model<S> = Model::build(&mc, 0)?;
        if model.params.len() != self.params.len() || model.bn_states.len() != self.bn.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors / {} batchnorms, model expects {} / {}",
                self.params.len(),
                self.bn.len(),
                model.params.len(),
                model.bn_states.len()
            )));
        }
        for (t, r) in model.params.tensors.iter_mut().zip(&self.params) {
            if t.shape != r.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: checkpoint shape {:?}, model shape {:?}",
                    r.name, r.shape, t.shape
                )));
            }
            t.data = r.data.iter().map(|&v| S::from_f64(v)).collect();
        }
        for (s, r) in model.bn_states.iter_mut().zip(&self.bn) {
            s.mean = r.mean.iter().map(|&v| S::from_f64(v)).collect();
            s.var = r.var.iter().map(|&v| S::from_f64(v)).collect();
        }
        let adam = match &self.adam {
            None => None,
            Some(rec) => {
                let mut a = Adam::new(rec.config, &model.params)?;
                a.step_count = rec.step_count;
                a.m = rec.m.iter().map(|t| t.iter().map(|&v| S::from_f64(v)).collect()).collect();
                a.v = rec.v.iter().map(|t| t.iter().map(|&v| S::from_f64(v)).collect()).collect();
                Some(a)
            }
        };
        Ok((model, adam, self.tracker.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let bytes =
            bincode::serialize(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Load and verify version and config hash. `force` skips the hash
    /// check (never the version check).
    pub fn load(path: &Path, expect: Option<&RunConfig>, force: bool) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ckpt: Checkpoint =
            bincode::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        if let Some(cfg) = expect {
            let want = config_hash(cfg);
            if ckpt.config_hash != want && !force {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {}, config {} (use --force to override)",
                    ckpt.config_hash, want
                )));
            }
        }
        Ok(ckpt)
    }
}
