//! Multi-seed sweeps: independent runs, aggregated mean ± sample standard
//! deviation (n − 1 denominator).

use resmoe_core::moe::EvalMode;
use resmoe_core::scalar::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::train::{evaluate, train};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub live_experts: Option<usize>,
    pub cv_imp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub per_seed: Vec<SeedResult>,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_accuracy: f64,
}

pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Run the config once per seed on the given train/eval datasets.
pub fn sweep<S: Scalar>(
    template: &RunConfig,
    seeds: &[u64],
    train_ds: &Dataset,
    eval_ds: &Dataset,
) -> Result<SweepResult> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep requires at least one seed".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = template.clone();
        cfg.train.seed = seed;
        let outcome = train::<S>(&cfg, train_ds, None)?;
        let (mut model, _, _) = outcome.checkpoint.restore::<S>(&cfg)?;
        let eval = evaluate(&mut model, eval_ds, cfg.train.batch_size, EvalMode::Sparse)?;
        per_seed.push(SeedResult {
            seed,
            accuracy: eval.accuracy,
            live_experts: eval.utilization.as_ref().map(|u| u.live_experts),
            cv_imp: eval.utilization.as_ref().map(|u| u.cv_imp),
        });
    }
    let (mean, std) = mean_and_sample_std(
        &per_seed.iter().map(|r| r.accuracy).collect::<Vec<_>>(),
    );
    Ok(SweepResult {
        per_seed,
        mean_accuracy: mean,
        std_accuracy: std,
    })
}
