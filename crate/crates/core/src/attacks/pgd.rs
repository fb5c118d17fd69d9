//! Sign-gradient projected descent with a cosine-decayed step size.

use serde::{Deserialize, Serialize};

use super::{cosine_decay, iterate, Attack, AttackBudget, AttackObjective, AttackTrace};
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub iterations: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            alpha_start: 4e-3,
            alpha_end: 4e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PgdAttack {
    cfg: PgdConfig,
}

impl PgdAttack {
    pub fn new(cfg: PgdConfig) -> Result<Self> {
        if cfg.iterations == 0 {
            return Err(config_err("pgd iterations must be >= 1"));
        }
        if !(cfg.alpha_end > 0.0 && cfg.alpha_start >= cfg.alpha_end) {
            return Err(config_err("pgd needs alpha_start >= alpha_end > 0"));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &PgdConfig {
        &self.cfg
    }
}

impl Attack for PgdAttack {
    fn name(&self) -> &str {
        "pgd"
    }

    fn iterations(&self) -> usize {
        self.cfg.iterations
    }

    /// `delta <- delta - alpha_t * sign(grad)`; zero gradients leave a coordinate unchanged.
    fn run(&self, x: &[f64], objective: &dyn AttackObjective, budget: AttackBudget) -> Result<AttackTrace> {
        let c = &self.cfg;
        iterate(x, objective, budget, c.iterations, |t, grad, delta| {
            let alpha = cosine_decay(c.alpha_start, c.alpha_end, t, c.iterations)?;
            for (d, g) in delta.iter_mut().zip(grad) {
                if *g != 0.0 {
                    *d -= alpha * g.signum();
                }
            }
            Ok(())
        })
    }
}
