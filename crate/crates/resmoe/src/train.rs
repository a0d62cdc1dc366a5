//! Sequential training loop, evaluation, and the determinism contract:
//! a fixed seed in f64 single-threaded mode fully determines every metric.

use resmoe_core::constraints::{
    importance_loss, kl_loss, ConstraintKind, ImportanceTracker,
};
use resmoe_core::metrics::{
    self, coefficient_of_variation, SampleRecord, UtilizationReport,
};
use resmoe_core::model::Model;
use resmoe_core::moe::EvalMode;
use resmoe_core::optim::Adam;
use resmoe_core::rng::SeedRng;
use resmoe_core::scalar::Scalar;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{epoch_batches, gather, Dataset};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub train_accuracy: f64,
    /// Importance summed over the epoch, normalized to shares. Empty for
    /// plain models.
    pub importance_shares: Vec<f64>,
    pub live_experts: usize,
    pub cv_imp: Option<f64>,
    pub skipped_maskings: u64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
}

/// Gate numbers from the most recent batch, dumped when the loss turns
/// non-finite.
fn gate_diagnostic(last: &Option<(Vec<f64>, Vec<f64>)>) -> String {
    match last {
        None => String::from("no gate state recorded"),
        Some((dense_row, importance)) => format!(
            "last batch gate: first dense row {dense_row:?}, importance {importance:?}"
        ),
    }
}

/// Run (or resume) training. `resume` must come from the same config; the
/// caller is responsible for hash-checking at load time.
pub fn train<S: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    let mc = cfg.model_config()?;
    if ds.num_classes != mc.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model expects {}",
            ds.num_classes, mc.num_classes
        )));
    }

    let (mut model, mut adam, mut tracker, start_epoch, mut step) = match resume {
        Some(ckpt) => {
            let (model, adam, tracker) = ckpt.restore::<S>(cfg)?;
            let adam = match adam {
                Some(a) => a,
                None => Adam::new(cfg.adam_config(), &model.params)?,
            };
            (model, adam, tracker, ckpt.epoch, ckpt.step)
        }
        None => {
            let model: Model<S> = Model::build(&mc, cfg.train.seed)?;
            let adam = Adam::new(cfg.adam_config(), &model.params)?;
            let tracker = mc.moe.as_ref().map(|m| ImportanceTracker::new(m.num_experts));
            (model, adam, tracker, 0, 0u64)
        }
    };

    let constraint = mc.moe.as_ref().map(|m| m.constraint);
    let mut log = Vec::new();
    let mut last_gate: Option<(Vec<f64>, Vec<f64>)> = None;

    for epoch in start_epoch..cfg.train.epochs {
        let batches = epoch_batches(ds.len(), cfg.train.batch_size, cfg.train.seed, epoch, true)?;
        let mut task_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut seen = 0usize;
        let mut correct = 0usize;
        let mut epoch_importance: Option<Vec<f64>> = None;
        let skipped_before = tracker.as_ref().map_or(0, |t| t.skipped_maskings);

        for (bi, batch) in batches.iter().enumerate() {
            // stateless augmentation stream so resume replays it exactly
            let mut aug_rng = SeedRng::new(cfg.train.seed)
                .derive(0xa06 ^ ((epoch as u64) << 24) ^ bi as u64);
            let (input, labels) = gather::<S>(
                ds,
                batch,
                cfg.data.augment,
                cfg.data.augment.then_some(&mut aug_rng),
            )?;
            let b = batch.len();

            let numeric = |e: resmoe_core::Error, last: &Option<(Vec<f64>, Vec<f64>)>| match e {
                resmoe_core::Error::NonFinite { op } => Error::Numeric(format!(
                    "non-finite value in `{op}` at epoch {epoch} batch {bi}; {}",
                    gate_diagnostic(last)
                )),
                other => Error::Core(other),
            };

            let mut pass = model
                .forward(&input, b, true, EvalMode::Sparse, tracker.as_mut())
                .map_err(|e| numeric(e, &last_gate))?;

            let ce = pass.graph.cross_entropy(pass.logits, &labels)?;
            let mut loss = ce;
            let mut aux_val = 0.0;
            if let (Some(gate), Some(c)) = (&pass.gate, &constraint) {
                last_gate = Some((
                    pass.graph.data(gate.dense)[..model.num_experts().unwrap_or(0)]
                        .iter()
                        .map(|v| v.to_f64())
                        .collect(),
                    gate.importance.clone(),
                ));
                let aux = match c.kind {
                    ConstraintKind::ImportanceLoss => {
                        Some(importance_loss(&mut pass.graph, gate.importance_node, c.w_imp)?)
                    }
                    ConstraintKind::KlLoss => {
                        Some(kl_loss(&mut pass.graph, gate.importance_node, b, c.w_kl)?)
                    }
                    _ => None,
                };
                if let Some(aux) = aux {
                    aux_val = pass.graph.data(aux)[0].to_f64();
                    loss = pass.graph.add(ce, aux)?;
                }
            }

            let task_val = pass.graph.data(ce)[0].to_f64();
            pass.graph
                .backward(loss)
                .map_err(|e| numeric(e, &last_gate))?;

            let grads: Vec<Option<&[S]>> =
                (0..model.params.len()).map(|i| pass.param_grad(i)).collect();
            adam.step(&mut model.params, &grads)
                .map_err(|e| numeric(e, &last_gate))?;

            for (i, &label) in labels.iter().enumerate() {
                let row = &pass.graph.data(pass.logits)[i * mc.num_classes..(i + 1) * mc.num_classes];
                let pred = argmax(row);
                if pred == label {
                    correct += 1;
                }
            }

            if let (Some(gate), Some(tracker)) = (&pass.gate, tracker.as_mut()) {
                tracker.update(&gate.importance, b)?;
                let acc = epoch_importance
                    .get_or_insert_with(|| vec![0.0; gate.importance.len()]);
                for (a, v) in acc.iter_mut().zip(&gate.importance) {
                    *a += v;
                }
            }

            task_sum += task_val * b as f64;
            aux_sum += aux_val * b as f64;
            seen += b;
            step += 1;
        }

        let (shares, live, cv) = match &epoch_importance {
            None => (Vec::new(), 0, None),
            Some(imp) => {
                let total: f64 = imp.iter().sum();
                let shares: Vec<f64> = imp.iter().map(|v| v / total).collect();
                let (_, live) = metrics::dead_expert_scan(&shares);
                (shares, live, coefficient_of_variation(imp).ok())
            }
        };
        log.push(EpochMetrics {
            epoch,
            task_loss: task_sum / seen as f64,
            aux_loss: aux_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            importance_shares: shares,
            live_experts: live,
            cv_imp: cv,
            skipped_maskings: tracker.as_ref().map_or(0, |t| t.skipped_maskings) - skipped_before,
        });
    }

    let checkpoint = Checkpoint::capture(
        cfg,
        &model,
        Some(&adam),
        tracker.as_ref(),
        cfg.train.epochs,
        step,
    );
    Ok(TrainOutcome { checkpoint, log })
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub records: Vec<SampleRecord>,
    pub utilization: Option<UtilizationReport>,
}

/// Top-1 evaluation with full per-sample gate capture.
pub fn evaluate<S: Scalar>(
    model: &mut Model<S>,
    ds: &Dataset,
    batch_size: usize,
    mode: EvalMode,
) -> Result<EvalResult> {
    ds.validate()?;
    let nc = model.config.num_classes;
    if ds.num_classes != nc {
        return Err(Error::Data(format!(
            "dataset has {} classes, model expects {nc}",
            ds.num_classes
        )));
    }
    let n = model.num_experts();
    let mut records = Vec::with_capacity(ds.len());
    for batch in epoch_batches(ds.len(), batch_size, 0, 0, false)? {
        let (input, labels) = gather::<S>(ds, &batch, false, None)?;
        let b = batch.len();
        let pass = model.forward(&input, b, false, mode, None)?;
        let logits = pass.graph.data(pass.logits);
        for (i, (&idx, &label)) in batch.iter().zip(&labels).enumerate() {
            let row: Vec<f64> = logits[i * nc..(i + 1) * nc]
                .iter()
                .map(|v| v.to_f64())
                .collect();
            let (dense, sparse, topk) = match (&pass.gate, n) {
                (Some(gate), Some(n)) => (
                    pass.graph.data(gate.dense)[i * n..(i + 1) * n]
                        .iter()
                        .map(|v| v.to_f64())
                        .collect(),
                    pass.graph.data(gate.sparse)[i * n..(i + 1) * n]
                        .iter()
                        .map(|v| v.to_f64())
                        .collect(),
                    gate.topk[i].clone(),
                ),
                _ => (Vec::new(), Vec::new(), Vec::new()),
            };
            records.push(SampleRecord {
                index: idx,
                label,
                prediction: argmax(&row),
                logits: row,
                dense,
                sparse,
                topk,
            });
        }
    }
    let correct = records.iter().filter(|r| r.prediction == r.label).count();
    let per_class =
        metrics::per_class_accuracy(records.iter().map(|r| (r.label, r.prediction)), nc);
    let utilization = match n {
        Some(n) => Some(metrics::utilization_report(&records, n)?),
        None => None,
    };
    Ok(EvalResult {
        accuracy: correct as f64 / records.len().max(1) as f64,
        per_class_accuracy: per_class,
        records,
        utilization,
    })
}
