//! The sparsely-gated mixture-of-experts layer: gate networks, top-k
//! sparsification with renormalization, expert mixing and forced-expert
//! evaluation modes.
//!
//! Routing is per sample (whole image), not per patch. Sparse weights are
//! the dense softmax weights restricted to the k largest entries and
//! renormalized by their sum, which keeps every effective weight vector a
//! convex combination.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    GapFc,
    ConvGapFc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub kind: GateKind,
    pub num_experts: usize,
    /// Channels of the gate conv (ConvGapFc only); defaults to channel-preserving.
    pub conv_channels: Option<usize>,
    /// Kernel size of the gate conv (ConvGapFc only).
    pub conv_kernel: usize,
}

impl GateConfig {
    pub fn gap_fc(num_experts: usize) -> Self {
        Self {
            kind: GateKind::GapFc,
            num_experts,
            conv_channels: None,
            conv_kernel: 3,
        }
    }

    pub fn conv_gap_fc(num_experts: usize) -> Self {
        Self {
            kind: GateKind::ConvGapFc,
            num_experts,
            conv_channels: None,
            conv_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts < 2 {
            return Err(Error::InvalidArgument(format!(
                "gate requires at least 2 experts, got {}",
                self.num_experts
            )));
        }
        Ok(())
    }
}

/// How expert weights are produced at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Top-k renormalized weights, only selected experts execute.
    Sparse,
    /// All experts execute with the dense softmax weights.
    Dense,
    /// All weight on one expert.
    Forced(usize),
}

/// Graph nodes of the gate parameters for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub conv_w: Option<NodeId>,
    pub conv_b: Option<NodeId>,
    pub fc_w: NodeId,
    pub fc_b: NodeId,
}

/// Per-batch gate output.
#[derive(Debug, Clone)]
pub struct GateOutput {
    pub logits: NodeId,
    /// softmax of the (possibly constraint-masked) logits, [B, N]
    pub dense: NodeId,
    /// top-k expert ids per sample, descending weight
    pub topk: Vec<Vec<usize>>,
    /// renormalized weights, zero off the top-k, [B, N]
    pub sparse: NodeId,
}

/// Run the gate: GAP -> FC for [`GateKind::GapFc`], Conv -> ReLU -> GAP -> FC
/// for [`GateKind::ConvGapFc`]. Returns the raw logits, [B, N].
pub fn gate_logits<S: Scalar>(
    graph: &mut Graph<S>,
    features: NodeId,
    gate: &GateNodes,
    kind: GateKind,
) -> Result<NodeId> {
    let pooled = match kind {
        GateKind::GapFc => graph.global_avg_pool(features)?,
        GateKind::ConvGapFc => {
            let conv_w = gate.conv_w.ok_or_else(|| {
                Error::InvalidArgument("ConvGapFc gate is missing its conv parameters".into())
            })?;
            let k = graph.shape(conv_w)[2];
            let y = graph.conv2d(features, conv_w, gate.conv_b, 1, k / 2)?;
            let y = graph.relu(y)?;
            graph.global_avg_pool(y)?
        }
    };
    graph.linear(pooled, gate.fc_w, Some(gate.fc_b))
}

/// Select the `k` largest entries of each row; ties broken by lower index.
pub fn topk_indices<S: Scalar>(row: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| match row[b].partial_cmp(&row[a]) {
        Some(core::cmp::Ordering::Equal) | None => a.cmp(&b),
        Some(ord) => ord,
    });
    idx.truncate(k);
    idx
}

/// Zero everything off the per-row top-k and renormalize the survivors by
/// their sum. The selection mask is treated as a constant: gradient flows
/// only through the renormalized weights of the selected experts.
pub fn topk_sparsify<S: Scalar>(
    graph: &mut Graph<S>,
    dense: NodeId,
    k: usize,
) -> Result<(NodeId, Vec<Vec<usize>>)> {
    let shape = graph.shape(dense).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "topk_sparsify: expected [B, N], got {shape:?}"
        )));
    }
    let (batch, n) = (shape[0], shape[1]);
    if k < 1 {
        return Err(Error::InvalidArgument("topk_sparsify: k must be >= 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "topk_sparsify: k = {k} exceeds {n} experts"
        )));
    }
    let mut mask = vec![S::ZERO; batch * n];
    let mut topk = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = &graph.data(dense)[b * n..(b + 1) * n];
        let sel = topk_indices(row, k);
        for &i in &sel {
            mask[b * n + i] = S::ONE;
        }
        topk.push(sel);
    }
    let mask = graph.constant(&[batch, n], mask)?;
    let kept = graph.mul(dense, mask)?;
    let norm = graph.row_sum(kept)?;
    let sparse = graph.row_div(kept, norm)?;
    Ok((sparse, topk))
}

/// Effective mixing weights for an evaluation mode.
///
/// `Sparse` renormalizes the top-k, `Dense` uses the softmax weights as-is,
/// `Forced(i)` puts weight one on expert `i` regardless of the gate.
pub fn mixing_weights<S: Scalar>(
    graph: &mut Graph<S>,
    dense: NodeId,
    k: usize,
    mode: EvalMode,
) -> Result<(NodeId, Vec<Vec<usize>>)> {
    let shape = graph.shape(dense).to_vec();
    let (batch, n) = (shape[0], shape[1]);
    match mode {
        EvalMode::Sparse => topk_sparsify(graph, dense, k),
        EvalMode::Dense => {
            let all: Vec<usize> = (0..n).collect();
            Ok((dense, vec![all; batch]))
        }
        EvalMode::Forced(i) => {
            if i >= n {
                return Err(Error::InvalidArgument(format!(
                    "forced expert {i} out of range for {n} experts"
                )));
            }
            let mut w = vec![S::ZERO; batch * n];
            for b in 0..batch {
                w[b * n + i] = S::ONE;
            }
            let w = graph.constant(&[batch, n], w)?;
            Ok((w, vec![vec![i]; batch]))
        }
    }
}

/// Which experts have a nonzero weight for at least one sample.
pub fn active_experts(topk: &[Vec<usize>], num_experts: usize) -> Vec<bool> {
    let mut active = vec![false; num_experts];
    for sel in topk {
        for &i in sel {
            active[i] = true;
        }
    }
    active
}

/// shortcut(x) + sum_i w_i(x) * e_i(x) over the executed experts.
///
/// `expert_outs[i]` is `None` for experts that were not executed; their
/// weight column must be all zero.
pub fn mix_experts<S: Scalar>(
    graph: &mut Graph<S>,
    shortcut: NodeId,
    expert_outs: &[Option<NodeId>],
    weights: NodeId,
) -> Result<NodeId> {
    let mut acc = shortcut;
    for (i, out) in expert_outs.iter().enumerate() {
        if let Some(e) = out {
            let w = graph.col_get(weights, i)?;
            let scaled = graph.row_scale(*e, w)?;
            acc = graph.add(acc, scaled)?;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sparse_row(dense: &[f64], k: usize) -> Vec<f64> {
        let mut g: Graph<f64> = Graph::new();
        let d = g.leaf(&[1, dense.len()], dense.to_vec(), false).unwrap();
        let (s, _) = topk_sparsify(&mut g, d, k).unwrap();
        g.data(s).to_vec()
    }

    #[test]
    fn reproduces_published_weight_pairs() {
        let s = sparse_row(&[0.4368, 0.1518, 0.1934, 0.2180], 2);
        assert!((s[0] - 0.6671).abs() < 1e-3, "{s:?}");
        assert!((s[3] - 0.3329).abs() < 1e-3, "{s:?}");
        assert_eq!((s[1], s[2]), (0.0, 0.0));

        let s = sparse_row(&[0.2917, 0.3326, 0.2141, 0.1616], 2);
        assert!((s[0] - 0.4672).abs() < 1e-3, "{s:?}");
        assert!((s[1] - 0.5328).abs() < 1e-3, "{s:?}");
        assert_eq!((s[2], s[3]), (0.0, 0.0));
    }

    #[test]
    fn k_equals_n_is_identity() {
        let dense = [0.1, 0.2, 0.3, 0.4];
        let s = sparse_row(&dense, 4);
        for (a, b) in s.iter().zip(dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn k_zero_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let d = g.leaf(&[1, 4], vec![0.25; 4], false).unwrap();
        assert!(topk_sparsify(&mut g, d, 0).is_err());
        assert!(topk_sparsify(&mut g, d, 5).is_err());
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let mut g: Graph<f64> = Graph::new();
        let d = g.leaf(&[1, 4], vec![0.25; 4], false).unwrap();
        let (_, topk) = topk_sparsify(&mut g, d, 2).unwrap();
        assert_eq!(topk[0], vec![0, 1]);
    }

    #[test]
    fn forced_mode_one_hot() {
        let mut g: Graph<f64> = Graph::new();
        let d = g.leaf(&[3, 4], vec![0.25; 12], false).unwrap();
        let (w, topk) = mixing_weights(&mut g, d, 2, EvalMode::Forced(2)).unwrap();
        for b in 0..3 {
            assert_eq!(&g.data(w)[b * 4..(b + 1) * 4], &[0.0, 0.0, 1.0, 0.0]);
            assert_eq!(topk[b], vec![2]);
        }
        assert!(mixing_weights(&mut g, d, 2, EvalMode::Forced(4)).is_err());
    }
}
