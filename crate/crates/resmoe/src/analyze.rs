//! Post-training analysis: specialization table, accuracy/weight
//! correlations and the per-sample gate-logit export.

use resmoe_core::metrics::{
    self, CorrelationRow, SampleRecord, SpecializationReport,
};
use resmoe_core::moe::EvalMode;
use resmoe_core::scalar::Scalar;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::train::evaluate;
use crate::{Error, Result};

pub struct Analysis {
    pub specialization: SpecializationReport,
    pub correlation: Vec<CorrelationRow>,
    pub records: Vec<SampleRecord>,
    pub sparse_accuracy: f64,
}

/// Evaluate the checkpoint in sparse mode plus once per forced expert and
/// assemble every report the paper's analysis needs.
pub fn analyze<S: Scalar>(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    ds: &Dataset,
    batch_size: usize,
) -> Result<Analysis> {
    let (mut model, _, _) = ckpt.restore::<S>(cfg)?;
    let num_experts = model
        .num_experts()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no MoE layer to analyze".into()))?;

    let sparse = evaluate(&mut model, ds, batch_size, EvalMode::Sparse)?;
    let (rows, skipped) =
        metrics::per_class_weight_table(&sparse.records, ds.num_classes, num_experts);
    let per_expert_top = metrics::expert_top_classes(&rows, num_experts);

    let mut forced_accuracy = Vec::with_capacity(num_experts);
    for e in 0..num_experts {
        let r = evaluate(&mut model, ds, batch_size, EvalMode::Forced(e))?;
        forced_accuracy.push(r.per_class_accuracy);
    }
    let (at_least, scored) =
        metrics::moe_vs_best_expert(&sparse.per_class_accuracy, &forced_accuracy);
    let correlation = metrics::expert_accuracy_correlation(&forced_accuracy, &rows)?;

    Ok(Analysis {
        specialization: SpecializationReport {
            per_class: rows,
            per_expert_top,
            forced_accuracy,
            moe_accuracy: sparse.per_class_accuracy.clone(),
            moe_at_least_best: at_least,
            classes_scored: scored,
            skipped_classes: skipped,
        },
        correlation,
        sparse_accuracy: sparse.accuracy,
        records: sparse.records,
    })
}
