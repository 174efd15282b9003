use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

use super::OptimizerConfig;

/// RMSProp with bias-corrected second moments and no momentum.
#[derive(Clone, Debug)]
pub struct RmsProp {
    cfg: OptimizerConfig,
    sq: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl RmsProp {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, sq: BTreeMap::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Learning rate for the next update.
    pub fn current_lr(&self) -> f64 {
        if self.cfg.cosine && self.cfg.steps > 0 {
            let frac = (self.t as f64 / self.cfg.steps as f64).min(1.0);
            self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            self.cfg.lr
        }
    }

    /// Global L2 norm of `grads`.
    pub fn grad_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
        grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Applies one update; returns the pre-clip gradient norm. Parameters
    /// without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<f64> {
        let norm = Self::grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite { step: self.t as usize, detail: format!("gradient norm {norm}") });
        }
        let clip = match self.cfg.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        self.t += 1;
        let rho = self.cfg.decay;
        let correction = 1.0 - rho.powi(self.t.min(i32::MAX as u64) as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(Error::Dimension(format!("gradient for `{name}` has {} entries, tensor {}", g.len(), p.numel())));
            }
            let sq = self.sq.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((w, &gi), s) in p.data_mut().iter_mut().zip(g).zip(sq.iter_mut()) {
                let gi = gi * clip;
                *s = rho * *s + (1.0 - rho) * gi * gi;
                *w -= lr * gi / ((*s / correction).sqrt() + self.cfg.eps);
            }
        }
        Ok(norm)
    }
}
