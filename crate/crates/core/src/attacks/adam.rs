//! Adam-style perturbation updates without bias correction.

use serde::{Deserialize, Serialize};

use super::{cosine_decay, iterate, Attack, AttackBudget, AttackObjective, AttackTrace};
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamAttackConfig {
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub xi: f64,
}

impl Default for AdamAttackConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            lr_start: 1e-3,
            lr_end: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            xi: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamAttack {
    cfg: AdamAttackConfig,
}

impl AdamAttack {
    pub fn new(cfg: AdamAttackConfig) -> Result<Self> {
        if cfg.iterations == 0 {
            return Err(config_err("adam iterations must be >= 1"));
        }
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(cfg.beta1) || !unit(cfg.beta2) || !(cfg.xi > 0.0) {
            return Err(config_err("adam needs 0 < beta1, beta2 < 1 and xi > 0"));
        }
        if !(cfg.lr_end > 0.0 && cfg.lr_start >= cfg.lr_end) {
            return Err(config_err("adam needs lr_start >= lr_end > 0"));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &AdamAttackConfig {
        &self.cfg
    }
}

impl Attack for AdamAttack {
    fn name(&self) -> &str {
        "adam"
    }

    fn iterations(&self) -> usize {
        self.cfg.iterations
    }

    /// `m = b1 m + (1-b1) g; v = b2 v + (1-b2) g^2; delta <- delta - lr_t m / (sqrt(v) + xi)`.
    fn run(&self, x: &[f64], objective: &dyn AttackObjective, budget: AttackBudget) -> Result<AttackTrace> {
        let c = &self.cfg;
        let mut m = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        iterate(x, objective, budget, c.iterations, |t, grad, delta| {
            let lr = cosine_decay(c.lr_start, c.lr_end, t, c.iterations)?;
            for (((d, g), mi), vi) in delta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                *d -= lr * *mi / (vi.sqrt() + c.xi);
            }
            Ok(())
        })
    }
}
