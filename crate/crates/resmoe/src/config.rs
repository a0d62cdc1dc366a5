//! Run configuration: TOML with dotted section names, full validation
//! before any side effect.

use std::path::{Path, PathBuf};

use resmoe_core::constraints::{ConstraintConfig, ConstraintKind};
use resmoe_core::model::{ModelConfig, MoeSettings};
use resmoe_core::moe::GateConfig;
use resmoe_core::optim::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateChoice {
    GapFc,
    ConvGapFc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintChoice {
    None,
    Importance,
    Kl,
    Relative,
    Mean,
}

impl ConstraintChoice {
    pub fn kind(self) -> ConstraintKind {
        match self {
            ConstraintChoice::None => ConstraintKind::None,
            ConstraintChoice::Importance => ConstraintKind::ImportanceLoss,
            ConstraintChoice::Kl => ConstraintKind::KlLoss,
            ConstraintChoice::Relative => ConstraintKind::RelativeHard,
            ConstraintChoice::Mean => ConstraintKind::MeanHard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSection {
    pub position: usize,
    #[serde(default = "default_experts")]
    pub num_experts: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_gate")]
    pub gate: GateChoice,
    #[serde(default = "default_constraint")]
    pub constraint: ConstraintChoice,
    #[serde(default = "default_w")]
    pub w_imp: f64,
    #[serde(default = "default_w")]
    pub w_kl: f64,
    #[serde(default = "default_m_rel")]
    pub m_rel: f64,
    #[serde(default = "default_m_mean")]
    pub m_mean: f64,
    /// Importance from dense weights instead of sparse (soft losses only).
    #[serde(default)]
    pub dense_importance: bool,
    /// Expert width as a fraction of the stage width; absent = solve for
    /// the MAC budget.
    #[serde(default)]
    pub expert_ratio: Option<f64>,
}

fn default_experts() -> usize {
    4
}
fn default_k() -> usize {
    2
}
fn default_gate() -> GateChoice {
    GateChoice::GapFc
}
fn default_constraint() -> ConstraintChoice {
    ConstraintChoice::None
}
fn default_w() -> f64 {
    0.5
}
fn default_m_rel() -> f64 {
    0.5
}
fn default_m_mean() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_classes: usize,
    #[serde(default = "default_one")]
    pub width_divisor: usize,
    #[serde(default = "default_res")]
    pub input_resolution: usize,
    #[serde(default)]
    pub moe: Option<MoeSection>,
}

fn default_one() -> usize {
    1
}
fn default_res() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Cifar100,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory holding train.bin / test.bin (cifar100 only).
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_domains")]
    pub num_domains: usize,
    #[serde(default = "default_cpd")]
    pub classes_per_domain: usize,
    #[serde(default = "default_spc")]
    pub samples_per_class: usize,
    /// Held-out samples per class, generated after the training samples.
    #[serde(default = "default_eval_spc")]
    pub eval_samples_per_class: usize,
    #[serde(default)]
    pub augment: bool,
}

fn default_domains() -> usize {
    4
}
fn default_cpd() -> usize {
    3
}
fn default_spc() -> usize {
    24
}
fn default_eval_spc() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_batch() -> usize {
    128
}
fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub optim: OptimSection,
    pub train: TrainSection,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate()?;
        self.adam_config().validate()?;
        if self.train.epochs < 1 || self.train.batch_size < 1 || self.train.eval_every < 1 {
            return Err(Error::Config(
                "epochs, batch_size and eval_every must be >= 1".into(),
            ));
        }
        match self.data.source {
            DataSource::Cifar100 => {
                let path = self.data.path.as_ref().ok_or_else(|| {
                    Error::Config("data.path is required for cifar100".into())
                })?;
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "data.path {} does not exist",
                        path.display()
                    )));
                }
            }
            DataSource::Synthetic => {
                let expected = self.data.num_domains * self.data.classes_per_domain;
                if expected != self.model.num_classes {
                    return Err(Error::Config(format!(
                        "synthetic data yields {expected} classes, model expects {}",
                        self.model.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let moe = match &self.model.moe {
            None => None,
            Some(m) => {
                let gate = match m.gate {
                    GateChoice::GapFc => GateConfig::gap_fc(m.num_experts),
                    GateChoice::ConvGapFc => GateConfig::conv_gap_fc(m.num_experts),
                };
                let mut constraint = ConstraintConfig::new(m.constraint.kind());
                constraint.w_imp = m.w_imp;
                constraint.w_kl = m.w_kl;
                constraint.m_rel = m.m_rel;
                constraint.m_mean = m.m_mean;
                constraint.dense_importance = m.dense_importance;
                Some(MoeSettings {
                    position: m.position,
                    num_experts: m.num_experts,
                    k: m.k,
                    gate,
                    constraint,
                    expert_bottleneck_ratio: m.expert_ratio,
                })
            }
        };
        Ok(ModelConfig {
            num_classes: self.model.num_classes,
            input_channels: 3,
            input_resolution: (self.model.input_resolution, self.model.input_resolution),
            width_divisor: self.model.width_divisor,
            moe,
        })
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optim.lr,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
        }
    }

    pub fn synthetic_spec(&self, samples_per_class: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_domains: self.data.num_domains,
            classes_per_domain: self.data.classes_per_domain,
            samples_per_class,
            resolution: self.model.input_resolution,
        }
    }

    /// Small synthetic setup every acceptance-style experiment runs on.
    pub fn desk_preset() -> Self {
        RunConfig {
            model: ModelSection {
                num_classes: 12,
                width_divisor: 8,
                input_resolution: 16,
                moe: Some(MoeSection {
                    position: 3,
                    num_experts: 4,
                    k: 2,
                    gate: GateChoice::GapFc,
                    constraint: ConstraintChoice::None,
                    w_imp: default_w(),
                    w_kl: default_w(),
                    m_rel: default_m_rel(),
                    m_mean: default_m_mean(),
                    dense_importance: false,
                    expert_ratio: Some(0.5),
                }),
            },
            data: DataSection {
                source: DataSource::Synthetic,
                path: None,
                num_domains: 4,
                classes_per_domain: 3,
                samples_per_class: default_spc(),
                eval_samples_per_class: default_eval_spc(),
                augment: false,
            },
            optim: OptimSection {
                lr: 3e-3,
                ..OptimSection::default()
            },
            train: TrainSection {
                epochs: 12,
                batch_size: 32,
                seed: 0,
                eval_every: 1,
                precision: Precision::F32,
            },
            out: None,
        }
    }

    /// Full-width CIFAR-100 protocol shape (paths must be filled in).
    pub fn full_preset() -> Self {
        RunConfig {
            model: ModelSection {
                num_classes: 100,
                width_divisor: 1,
                input_resolution: 32,
                moe: Some(MoeSection {
                    position: 4,
                    num_experts: 4,
                    k: 2,
                    gate: GateChoice::GapFc,
                    constraint: ConstraintChoice::Importance,
                    w_imp: default_w(),
                    w_kl: default_w(),
                    m_rel: default_m_rel(),
                    m_mean: default_m_mean(),
                    dense_importance: false,
                    expert_ratio: None,
                }),
            },
            data: DataSection {
                source: DataSource::Cifar100,
                path: Some(PathBuf::from("data/cifar-100-binary")),
                num_domains: default_domains(),
                classes_per_domain: default_cpd(),
                samples_per_class: default_spc(),
                eval_samples_per_class: default_eval_spc(),
                augment: false,
            },
            optim: OptimSection::default(),
            train: TrainSection {
                epochs: 150,
                batch_size: 128,
                seed: 0,
                eval_every: 1,
                precision: Precision::F32,
            },
            out: None,
        }
    }
}
