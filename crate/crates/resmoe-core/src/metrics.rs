//! Utilization and specialization analysis over completed evaluation
//! passes. Everything here is a pure function of per-sample records, so
//! reports can be recomputed from snapshots at any batch boundary.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One evaluated sample with its gate state; the raw material for every
/// report and for the gate-logit export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub logits: Vec<f64>,
    pub dense: Vec<f64>,
    pub sparse: Vec<f64>,
    pub topk: Vec<usize>,
}

/// 100 * population sigma / mean.
pub fn coefficient_of_variation(v: &[f64]) -> Result<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::InvalidArgument(
            "coefficient_of_variation: mean must be positive".into(),
        ));
    }
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(100.0 * libm::sqrt(var) / mean)
}

/// Experts with share below 1% of total importance; returns (dead ids, live count).
pub fn dead_expert_scan(shares: &[f64]) -> (Vec<usize>, usize) {
    let dead: Vec<usize> = shares
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < 0.01)
        .map(|(i, _)| i)
        .collect();
    let live = shares.len() - dead.len();
    (dead, live)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilizationReport {
    /// CV (%) of per-expert activation counts; a sample counts toward every
    /// expert in its top-k.
    pub cv_act: f64,
    /// CV (%) of per-expert total importance.
    pub cv_imp: f64,
    pub live_experts: usize,
    pub dead_experts: Vec<usize>,
    pub per_expert_importance_share: Vec<f64>,
    pub activation_counts: Vec<u64>,
}

pub fn utilization_report(records: &[SampleRecord], num_experts: usize) -> Result<UtilizationReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "utilization_report: no records".into(),
        ));
    }
    let mut counts = vec![0u64; num_experts];
    let mut importance = vec![0.0; num_experts];
    for rec in records {
        for &e in &rec.topk {
            counts[e] += 1;
        }
        for (acc, &w) in importance.iter_mut().zip(&rec.sparse) {
            *acc += w;
        }
    }
    let total: f64 = importance.iter().sum();
    let shares: Vec<f64> = importance.iter().map(|&v| v / total).collect();
    let (dead, live) = dead_expert_scan(&shares);
    Ok(UtilizationReport {
        cv_act: coefficient_of_variation(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())?,
        cv_imp: coefficient_of_variation(&importance)?,
        live_experts: live,
        dead_experts: dead,
        per_expert_importance_share: shares,
        activation_counts: counts,
    })
}

/// Per-class gate behavior: mean weights and activation counts per expert.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassWeightRow {
    pub class: usize,
    pub samples: usize,
    pub mean_dense: Vec<f64>,
    pub mean_sparse: Vec<f64>,
    pub activations: Vec<u64>,
}

/// Classes ranked by the mean dense weight one expert assigns them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertTopClasses {
    pub expert: usize,
    /// (class, mean dense weight), descending.
    pub classes: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecializationReport {
    pub per_class: Vec<ClassWeightRow>,
    pub per_expert_top: Vec<ExpertTopClasses>,
    /// [expert][class] accuracy under forced-expert evaluation.
    pub forced_accuracy: Vec<Vec<f64>>,
    /// Per-class accuracy of the full sparse MoE.
    pub moe_accuracy: Vec<f64>,
    /// Classes where the full MoE is at least as accurate as its best
    /// forced expert, out of `classes_scored`.
    pub moe_at_least_best: usize,
    pub classes_scored: usize,
    /// Classes skipped for having no samples.
    pub skipped_classes: Vec<usize>,
}

/// Average each expert's weights over every class's samples.
pub fn per_class_weight_table(
    records: &[SampleRecord],
    num_classes: usize,
    num_experts: usize,
) -> (Vec<ClassWeightRow>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for class in 0..num_classes {
        let members: Vec<&SampleRecord> =
            records.iter().filter(|r| r.label == class).collect();
        if members.is_empty() {
            skipped.push(class);
            continue;
        }
        let inv = 1.0 / members.len() as f64;
        let mut mean_dense = vec![0.0; num_experts];
        let mut mean_sparse = vec![0.0; num_experts];
        let mut activations = vec![0u64; num_experts];
        for rec in &members {
            for i in 0..num_experts {
                mean_dense[i] += rec.dense[i] * inv;
                mean_sparse[i] += rec.sparse[i] * inv;
            }
            for &e in &rec.topk {
                activations[e] += 1;
            }
        }
        rows.push(ClassWeightRow {
            class,
            samples: members.len(),
            mean_dense,
            mean_sparse,
            activations,
        });
    }
    (rows, skipped)
}

/// For each expert, classes sorted by its mean dense weight, descending.
pub fn expert_top_classes(rows: &[ClassWeightRow], num_experts: usize) -> Vec<ExpertTopClasses> {
    (0..num_experts)
        .map(|expert| {
            let mut classes: Vec<(usize, f64)> = rows
                .iter()
                .map(|r| (r.class, r.mean_dense[expert]))
                .collect();
            classes.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            ExpertTopClasses { expert, classes }
        })
        .collect()
}

/// Per-class accuracy from (label, prediction) pairs. Classes without
/// samples report NaN and should be skipped by callers.
pub fn per_class_accuracy(
    pairs: impl Iterator<Item = (usize, usize)>,
    num_classes: usize,
) -> Vec<f64> {
    let mut total = vec![0u64; num_classes];
    let mut correct = vec![0u64; num_classes];
    for (label, pred) in pairs {
        total[label] += 1;
        if pred == label {
            correct[label] += 1;
        }
    }
    (0..num_classes)
        .map(|c| {
            if total[c] == 0 {
                f64::NAN
            } else {
                correct[c] as f64 / total[c] as f64
            }
        })
        .collect()
}

/// Count classes where the full MoE performs at least as well as the best
/// forced expert; ignores classes with no samples.
pub fn moe_vs_best_expert(moe_accuracy: &[f64], forced_accuracy: &[Vec<f64>]) -> (usize, usize) {
    let mut at_least = 0;
    let mut scored = 0;
    for (c, &moe) in moe_accuracy.iter().enumerate() {
        if moe.is_nan() {
            continue;
        }
        scored += 1;
        let best = forced_accuracy
            .iter()
            .map(|acc| acc[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if moe >= best {
            at_least += 1;
        }
    }
    (at_least, scored)
}

// ---- correlation ----

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

/// Ranks with average-rank tie handling (1-based).
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub quantity: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

/// Correlation between forced-expert per-class accuracy and the gate's
/// weight assignment, pooled over (class, expert) pairs: sparse weights,
/// dense weights, and activation counts.
pub fn expert_accuracy_correlation(
    forced_accuracy: &[Vec<f64>],
    rows: &[ClassWeightRow],
) -> Result<Vec<CorrelationRow>> {
    let num_experts = forced_accuracy.len();
    if rows.len() < 3 {
        return Err(Error::InvalidArgument(
            "expert_accuracy_correlation: need at least 3 classes".into(),
        ));
    }
    let mut acc = Vec::new();
    let mut sparse = Vec::new();
    let mut dense = Vec::new();
    let mut act = Vec::new();
    for row in rows {
        for e in 0..num_experts {
            let a = forced_accuracy[e][row.class];
            if a.is_nan() {
                continue;
            }
            acc.push(a);
            sparse.push(row.mean_sparse[e]);
            dense.push(row.mean_dense[e]);
            act.push(row.activations[e] as f64);
        }
    }
    let make = |name: &str, y: &[f64]| CorrelationRow {
        quantity: String::from(name),
        pearson: pearson(&acc, y),
        spearman: spearman(&acc, y),
    };
    Ok(vec![
        make("sparse_weights", &sparse),
        make("dense_weights", &dense),
        make("activations", &act),
    ])
}
