//! AdamW with decoupled weight decay.
//!
//! The decay term is scaled by the learning rate (the convention used by the
//! reference deep-learning stacks), so `weight_decay = 0` reduces to plain
//! Adam and `lr = 0` leaves parameters untouched.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use serde::{Deserialize, Serialize};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    /// First/second moment buffers, one pair per parameter, in set order.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    step_count: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamSet) -> Self {
        let moments = params
            .tensors()
            .map(|t| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
            .collect();
        AdamW {
            cfg,
            moments,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter in the set. Requires a populated
    /// gradient on each; gradients are left in place (callers clear them).
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (idx, (name, p)) in params.iter_mut().enumerate() {
            let grad = p.grad.as_ref().ok_or_else(|| {
                Error::Contract(format!("adamw_step: parameter {name:?} has no gradient"))
            })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {name}"),
                });
            }
            let (m, v) = &mut self.moments[idx];
            let grad = grad.clone();
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.cfg.lr * self.cfg.weight_decay * data[i];
                data[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
