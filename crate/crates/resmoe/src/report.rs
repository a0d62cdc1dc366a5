//! Report files: comma-separated tables with a header line and a key=value
//! run summary. Floats use Rust's shortest round-trip formatting, so a
//! fixed checkpoint always produces byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use resmoe_core::metrics::{CorrelationRow, SampleRecord, SpecializationReport, UtilizationReport};

use crate::train::EpochMetrics;
use crate::Result;

pub const REPORT_VERSION: u32 = 1;

fn version_line(kind: &str) -> String {
    format!("# resmoe {kind} v{REPORT_VERSION}\n")
}

pub fn specialization_csv(report: &SpecializationReport, class_names: &[String]) -> String {
    let n = report
        .per_class
        .first()
        .map_or(0, |r| r.mean_dense.len());
    let mut out = version_line("specialization");
    out.push_str("class,name,samples");
    for i in 0..n {
        write!(out, ",dense_{i}").unwrap();
    }
    for i in 0..n {
        write!(out, ",sparse_{i}").unwrap();
    }
    for i in 0..n {
        write!(out, ",activations_{i}").unwrap();
    }
    out.push_str(",moe_accuracy");
    for i in 0..n {
        write!(out, ",forced_{i}_accuracy").unwrap();
    }
    out.push('\n');
    for row in &report.per_class {
        let name = class_names
            .get(row.class)
            .map(String::as_str)
            .unwrap_or("?");
        write!(out, "{},{},{}", row.class, name, row.samples).unwrap();
        for v in &row.mean_dense {
            write!(out, ",{v}").unwrap();
        }
        for v in &row.mean_sparse {
            write!(out, ",{v}").unwrap();
        }
        for v in &row.activations {
            write!(out, ",{v}").unwrap();
        }
        write!(out, ",{}", report.moe_accuracy[row.class]).unwrap();
        for acc in &report.forced_accuracy {
            write!(out, ",{}", acc[row.class]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn correlation_csv(rows: &[CorrelationRow]) -> String {
    let mut out = version_line("correlation");
    out.push_str("quantity,pearson,spearman\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        writeln!(out, "{},{},{}", r.quantity, fmt(r.pearson), fmt(r.spearman)).unwrap();
    }
    out
}

pub fn gate_logits_csv(records: &[SampleRecord]) -> String {
    let nc = records.first().map_or(0, |r| r.logits.len());
    let n = records.first().map_or(0, |r| r.dense.len());
    let mut out = version_line("gate-logits");
    out.push_str("index,label,prediction");
    for i in 0..nc {
        write!(out, ",logit_{i}").unwrap();
    }
    for i in 0..n {
        write!(out, ",dense_{i}").unwrap();
    }
    for i in 0..n {
        write!(out, ",sparse_{i}").unwrap();
    }
    out.push_str(",topk\n");
    for r in records {
        write!(out, "{},{},{}", r.index, r.label, r.prediction).unwrap();
        for v in &r.logits {
            write!(out, ",{v}").unwrap();
        }
        for v in &r.dense {
            write!(out, ",{v}").unwrap();
        }
        for v in &r.sparse {
            write!(out, ",{v}").unwrap();
        }
        let topk: Vec<String> = r.topk.iter().map(|e| e.to_string()).collect();
        writeln!(out, ",{}", topk.join("|")).unwrap();
    }
    out
}

pub fn metrics_log_csv(log: &[EpochMetrics]) -> String {
    let n = log.first().map_or(0, |m| m.importance_shares.len());
    let mut out = version_line("metrics");
    out.push_str("epoch,task_loss,aux_loss,train_accuracy,live_experts,cv_imp,skipped_maskings");
    for i in 0..n {
        write!(out, ",importance_share_{i}").unwrap();
    }
    out.push('\n');
    for m in log {
        write!(
            out,
            "{},{},{},{},{},{},{}",
            m.epoch,
            m.task_loss,
            m.aux_loss,
            m.train_accuracy,
            m.live_experts,
            m.cv_imp.map_or(String::new(), |v| v.to_string()),
            m.skipped_maskings
        )
        .unwrap();
        for v in &m.importance_shares {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Single structured-text run summary: key=value lines under [section]
/// headers.
pub fn run_summary(
    accuracy: f64,
    utilization: Option<&UtilizationReport>,
    log: &[EpochMetrics],
) -> String {
    let mut out = version_line("summary");
    out.push_str("[run]\n");
    writeln!(out, "epochs={}", log.len()).unwrap();
    writeln!(out, "accuracy={accuracy}").unwrap();
    if let Some(last) = log.last() {
        writeln!(out, "final_task_loss={}", last.task_loss).unwrap();
        writeln!(out, "final_aux_loss={}", last.aux_loss).unwrap();
    }
    if let Some(u) = utilization {
        out.push_str("[utilization]\n");
        writeln!(out, "cv_imp={}", u.cv_imp).unwrap();
        writeln!(out, "cv_act={}", u.cv_act).unwrap();
        writeln!(out, "live_experts={}", u.live_experts).unwrap();
        let shares: Vec<String> = u
            .per_expert_importance_share
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(out, "importance_shares={}", shares.join(",")).unwrap();
        let dead: Vec<String> = u.dead_experts.iter().map(|e| e.to_string()).collect();
        writeln!(out, "dead_experts={}", dead.join(",")).unwrap();
    }
    out
}

pub fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}
