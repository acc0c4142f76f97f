//! Adam optimizer over [`ParamSet`]s.

use std::collections::BTreeMap;

use crate::autodiff::{GradientMap, ParamId, ParamSet};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// First/second moment state per parameter; moments are created lazily the
/// first time a parameter receives a gradient.
pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    first: BTreeMap<ParamId, Tensor>,
    second: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update: `theta -= lr * m_hat / (sqrt(v_hat) + eps)`. Parameters
    /// with zero gradient are left exactly unchanged.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientMap) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (id, grad) in grads.iter() {
            let theta = match params.get_mut(id) {
                Some(t) => t,
                None => continue,
            };
            let m = self
                .first
                .entry(id)
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
            let v = self
                .second
                .entry(id)
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
            for ((theta_i, (m_i, v_i)), &g) in theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(grad.data())
            {
                *m_i = self.cfg.beta1 * *m_i + (1.0 - self.cfg.beta1) * g;
                *v_i = self.cfg.beta2 * *v_i + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *m_i / c1;
                let v_hat = *v_i / c2;
                *theta_i -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
