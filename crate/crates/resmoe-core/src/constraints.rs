//! Expert-utilization constraints: the two differentiable auxiliary losses
//! (squared-CV importance loss and KL divergence to the uniform expert
//! distribution) and the two hard training-time masking rules (relative
//! importance and mean importance).
//!
//! The hard constraints decide the mask for batch t from statistics
//! accumulated through batch t-1, mask the gate logits before the softmax
//! so the surviving weights renormalize to a convex combination, and update
//! the accumulators with the post-masking weights afterwards.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};
use crate::{Error, Result};

/// Large negative logit standing in for -inf; keeps every tensor finite.
pub const MASK_LOGIT: f64 = -1.0e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    None,
    ImportanceLoss,
    KlLoss,
    RelativeHard,
    MeanHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub kind: ConstraintKind,
    pub w_imp: f64,
    pub w_kl: f64,
    pub m_rel: f64,
    pub m_mean: f64,
    /// Compute importance from dense (pre-top-k) weights instead of the
    /// realized sparse weights. Off by default; exists for ablation.
    pub dense_importance: bool,
}

impl ConstraintConfig {
    pub fn new(kind: ConstraintKind) -> Self {
        Self {
            kind,
            w_imp: 0.5,
            w_kl: 0.5,
            m_rel: 0.5,
            m_mean: 0.3,
            dense_importance: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_imp < 0.0 || self.w_kl < 0.0 || self.m_rel < 0.0 || self.m_mean < 0.0 {
            return Err(Error::InvalidArgument(
                "constraint weights and thresholds must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn is_hard(&self) -> bool {
        matches!(
            self.kind,
            ConstraintKind::RelativeHard | ConstraintKind::MeanHard
        )
    }

    pub fn is_soft(&self) -> bool {
        matches!(
            self.kind,
            ConstraintKind::ImportanceLoss | ConstraintKind::KlLoss
        )
    }
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self::new(ConstraintKind::None)
    }
}

/// Importance per expert: column sums of the per-sample weight matrix.
pub fn batch_importance(weights: &[f64], batch: usize, num_experts: usize) -> Result<Vec<f64>> {
    if batch == 0 {
        return Err(Error::InvalidArgument(
            "batch_importance: empty batch".into(),
        ));
    }
    debug_assert_eq!(weights.len(), batch * num_experts);
    let mut imp = vec![0.0; num_experts];
    for b in 0..batch {
        for i in 0..num_experts {
            imp[i] += weights[b * num_experts + i];
        }
    }
    Ok(imp)
}

/// (I_i - mean(I)) / mean(I) per expert; entries sum to zero.
pub fn relative_importance(importance: &[f64]) -> Result<Vec<f64>> {
    let mean = importance.iter().sum::<f64>() / importance.len() as f64;
    if mean <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "relative_importance: mean importance {mean} must be positive"
        )));
    }
    Ok(importance.iter().map(|&v| (v - mean) / mean).collect())
}

/// Running utilization statistics behind both hard constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTracker {
    pub num_experts: usize,
    /// Batches seen so far.
    pub step: u64,
    /// Sum over past batches of the per-batch relative importances.
    pub cum_rel_importance: Vec<f64>,
    /// Sum over past batches of I_i(X) / |X|.
    sum_mean_importance: Vec<f64>,
    /// Sum over past batches of the per-batch mean over experts of I_i / |X|.
    sum_batch_mean: f64,
    /// Batches where masking would have left fewer survivors than required
    /// and was skipped.
    pub skipped_maskings: u64,
}

impl ImportanceTracker {
    pub fn new(num_experts: usize) -> Self {
        Self {
            num_experts,
            step: 0,
            cum_rel_importance: vec![0.0; num_experts],
            sum_mean_importance: vec![0.0; num_experts],
            sum_batch_mean: 0.0,
            skipped_maskings: 0,
        }
    }

    /// Mean per-sample importance per expert over all batches so far.
    pub fn running_mean_importance(&self) -> Vec<f64> {
        if self.step == 0 {
            return vec![0.0; self.num_experts];
        }
        let t = self.step as f64;
        self.sum_mean_importance.iter().map(|&v| v / t).collect()
    }

    /// Running mean over batches of the expert-averaged per-sample
    /// importance; equals 1/N once weights are convex.
    pub fn running_batch_mean(&self) -> f64 {
        if self.step == 0 {
            0.0
        } else {
            self.sum_batch_mean / self.step as f64
        }
    }

    /// Candidate mask for the incoming batch (true = expert deactivated),
    /// from statistics through the previous batch. Never masks on the
    /// first batch since all accumulators start at zero.
    pub fn candidate_mask(&self, cfg: &ConstraintConfig) -> Vec<bool> {
        match cfg.kind {
            ConstraintKind::RelativeHard => self
                .cum_rel_importance
                .iter()
                .map(|&v| v > cfg.m_rel)
                .collect(),
            ConstraintKind::MeanHard => {
                let mean = self.running_mean_importance();
                let batch_mean = self.running_batch_mean();
                mean.iter().map(|&v| v - batch_mean > cfg.m_mean).collect()
            }
            _ => vec![false; self.num_experts],
        }
    }

    /// Mask actually applied: the candidate mask unless it would leave
    /// fewer than `min_survivors` experts, in which case masking is
    /// skipped for this batch and the warning counter increments.
    pub fn effective_mask(&mut self, cfg: &ConstraintConfig, min_survivors: usize) -> Vec<bool> {
        let mask = self.candidate_mask(cfg);
        let masked = mask.iter().filter(|&&m| m).count();
        if masked == 0 {
            return mask;
        }
        if self.num_experts - masked < min_survivors.max(1) {
            self.skipped_maskings += 1;
            return vec![false; self.num_experts];
        }
        mask
    }

    /// Fold one batch's post-masking importances into the accumulators.
    pub fn update(&mut self, importance: &[f64], batch_size: usize) -> Result<()> {
        if importance.len() != self.num_experts {
            return Err(Error::ShapeMismatch(format!(
                "tracker update: {} importances for {} experts",
                importance.len(),
                self.num_experts
            )));
        }
        let rel = relative_importance(importance)?;
        for (acc, r) in self.cum_rel_importance.iter_mut().zip(rel) {
            *acc += r;
        }
        let inv_b = 1.0 / batch_size as f64;
        let mut batch_mean = 0.0;
        for (acc, &imp) in self.sum_mean_importance.iter_mut().zip(importance) {
            *acc += imp * inv_b;
            batch_mean += imp * inv_b;
        }
        self.sum_batch_mean += batch_mean / self.num_experts as f64;
        self.step += 1;
        Ok(())
    }
}

/// Push masked logits: deactivated experts get [`MASK_LOGIT`] added so the
/// following softmax gives them (numerically) zero weight.
pub fn mask_logits<S: Scalar>(
    graph: &mut Graph<S>,
    logits: NodeId,
    mask: &[bool],
) -> Result<NodeId> {
    if mask.iter().all(|&m| !m) {
        return Ok(logits);
    }
    let shape = graph.shape(logits).to_vec();
    let (batch, n) = (shape[0], shape[1]);
    if mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "mask_logits: {} mask entries for {n} experts",
            mask.len()
        )));
    }
    let mut add = vec![S::ZERO; batch * n];
    for b in 0..batch {
        for (i, &m) in mask.iter().enumerate() {
            if m {
                add[b * n + i] = S::from_f64(MASK_LOGIT);
            }
        }
    }
    let add = graph.constant(&[batch, n], add)?;
    graph.add(logits, add)
}

/// w_imp * (sigma / mu)^2 of the importance vector, population sigma,
/// differentiable back into the gate.
pub fn importance_loss<S: Scalar>(
    graph: &mut Graph<S>,
    importance: NodeId,
    w_imp: f64,
) -> Result<NodeId> {
    let n = graph.data(importance).len();
    let total: f64 = graph.data(importance).iter().map(|v| v.to_f64()).sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "importance_loss: mean importance must be positive".into(),
        ));
    }
    let inv_n = S::from_f64(1.0 / n as f64);
    let sum = graph.sum_all(importance)?;
    let mu = graph.mul_scalar(sum, inv_n)?;
    let centered = graph.sub_broadcast(importance, mu)?;
    let sq = graph.mul(centered, centered)?;
    let sumsq = graph.sum_all(sq)?;
    let var = graph.mul_scalar(sumsq, inv_n)?;
    let mu2 = graph.mul(mu, mu)?;
    let cv2 = graph.div(var, mu2)?;
    graph.mul_scalar(cv2, S::from_f64(w_imp))
}

/// w_KL * sum_i (I_i/B) ln(I_i N / B), the KL divergence between the
/// realized expert distribution and uniform, with 0 ln 0 := 0.
pub fn kl_loss<S: Scalar>(
    graph: &mut Graph<S>,
    importance: NodeId,
    batch_size: usize,
    w_kl: f64,
) -> Result<NodeId> {
    let n = graph.data(importance).len();
    if graph.data(importance).iter().any(|v| v.to_f64() < 0.0) {
        return Err(Error::InvalidArgument(
            "kl_loss: negative importance".into(),
        ));
    }
    // (I_i/B) ln(I_i N/B) = (1/N) * u ln u  with  u = I_i N / B
    let u = graph.mul_scalar(importance, S::from_f64(n as f64 / batch_size as f64))?;
    let terms = graph.xlnx(u)?;
    let sum = graph.sum_all(terms)?;
    graph.mul_scalar(sum, S::from_f64(w_kl / n as f64))
}
