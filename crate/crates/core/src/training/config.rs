use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Ablation;
use crate::numerics::AdamWConfig;

/// Training hyperparameters. Every field is serialized; unknown keys are
/// rejected on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Multiplicative per-step learning-rate decay (1.0 keeps it constant).
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub lambda_dur: f64,
    pub lambda_cfm: f64,
    pub lambda_ref: f64,
    pub no_dsdr: bool,
    pub no_dialect_id: bool,
    pub seed: u64,
    pub log_every: usize,
    /// Write a resumable training state every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            lr_decay: 1.0,
            batch_size: 16,
            max_steps: 20_000,
            lambda_dur: 1.0,
            lambda_cfm: 1.0,
            lambda_ref: 0.1,
            no_dsdr: false,
            no_dialect_id: false,
            seed: 7,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [("lambda_dur", self.lambda_dur), ("lambda_cfm", self.lambda_cfm), ("lambda_ref", self.lambda_ref)];
        if let Some((name, w)) = weights.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("{name} must be a non-negative number, got {w}")));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation { no_dsdr: self.no_dsdr, no_dialect_id: self.no_dialect_id }
    }

    pub fn with_ablation(&self, a: Ablation) -> Self {
        TrainConfig { no_dsdr: a.no_dsdr, no_dialect_id: a.no_dialect_id, ..self.clone() }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
        }
    }
}
