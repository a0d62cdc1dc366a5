//! Adam optimizer over a [`ParamStore`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First and second moment state, aligned with the parameter store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam<S: Scalar> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let m = params
            .tensors
            .iter()
            .map(|t| vec![S::ZERO; t.data.len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Ok(Self {
            config,
            step_count: 0,
            m,
            v,
        })
    }

    /// Apply one update. `grads[i]` is the gradient of tensor `i`; `None`
    /// means zero gradient (the moments still decay).
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Option<&[S]>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        // lr * sqrt(1 - b2^t) / (1 - b1^t), the usual fused bias correction
        let alpha =
            self.config.lr * libm::sqrt(1.0 - libm::pow(b2, t)) / (1.0 - libm::pow(b1, t));
        let alpha = S::from_f64(alpha);
        let b1 = S::from_f64(b1);
        let b2 = S::from_f64(b2);
        let one_m_b1 = S::ONE - b1;
        let one_m_b2 = S::ONE - b2;
        let eps = S::from_f64(self.config.eps);

        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match grads[i] {
                Some(g) => {
                    if g.len() != tensor.data.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "gradient for `{}` has {} values, expected {}",
                            tensor.name,
                            g.len(),
                            tensor.data.len()
                        )));
                    }
                    for j in 0..g.len() {
                        if !g[j].is_finite() {
                            return Err(Error::NonFinite { op: "adam" });
                        }
                        m[j] = b1 * m[j] + one_m_b1 * g[j];
                        v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
                        tensor.data[j] = tensor.data[j] - alpha * m[j] / (v[j].sqrt() + eps);
                    }
                }
                None => {
                    for j in 0..m.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                        tensor.data[j] = tensor.data[j] - alpha * m[j] / (v[j].sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
