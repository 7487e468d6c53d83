//! Adaptive-moment optimisers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Weight decay applied directly to the parameters.
    Adamw,
    /// Weight decay added to the gradient as an L2 term.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Conversations per update.
    pub batch_size: usize,
    pub epochs: usize,
    /// Global L2 clipping threshold; `null` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "optimizer.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "optimizer.batch_size and optimizer.epochs must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("optimizer.grad_clip_norm must be > 0, got {c}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer.weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clips `grads` in place if configured, then updates `store`. Returns the
    /// pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut GradStore) -> f64 {
        let norm = match self.cfg.grad_clip_norm {
            Some(c) => grads.clip_global_norm(c),
            None => grads.global_norm(),
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr = self.cfg.learning_rate;
        let wd = self.cfg.weight_decay;
        let decoupled = self.cfg.kind == OptimizerKind::Adamw;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let mut gi = g.as_slice()[i];
                let pi = &mut p.as_mut_slice()[i];
                if !decoupled {
                    gi += wd * *pi;
                }
                let mi = &mut m.as_mut_slice()[i];
                let vi = &mut v.as_mut_slice()[i];
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
                if decoupled {
                    *pi -= lr * wd * *pi;
                }
                *pi -= lr * update;
            }
        }
        norm
    }
}
