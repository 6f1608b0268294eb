//! Adam with bias correction and an inverse-time learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr0: f64,
    /// Inverse-time decay: lr_t = lr0 / (1 + decay * t) per optimizer step.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

impl AdamConfig {
    /// Effective learning rate at step t (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        self.lr0 / (1.0 + self.decay * t as f64)
    }
}

/// One Adam update over every parameter in the store; increments the step.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, cfg: &AdamConfig) {
    store.step += 1;
    let t = store.step;
    let lr = cfg.lr_at(t);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (entry, grad) in store.params.iter_mut().zip(&grads.by_param) {
        for i in 0..entry.data.len() {
            let g = grad[i];
            entry.adam_m[i] = cfg.beta1 * entry.adam_m[i] + (1.0 - cfg.beta1) * g;
            entry.adam_v[i] = cfg.beta2 * entry.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = entry.adam_m[i] / bc1;
            let v_hat = entry.adam_v[i] / bc2;
            entry.data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}
