use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied once per step.
    pub lr_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2, lr_decay: 1.0 }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        OptimizerState { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.lr_decay.powf(self.step as f64)
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
///
/// Weight decay scales the parameter directly (`p -= lr * wd * p`) before the
/// adaptive step; it never enters the moment estimates.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, grads: &[Tensor<T>], state: &mut OptimizerState<T>) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape("adamw_step", format!("{} params, {} grads, {} moments", store.len(), grads.len(), state.m.len())));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::shape("adamw_step", format!("{}: grad {:?} vs param {:?}", store.name(id), g.shape(), store.get(id).shape())));
        }
    }
    let cfg = state.config;
    if cfg.lr < 0.0 {
        return Err(Error::InvalidArgument(format!("negative learning rate {}", cfg.lr)));
    }
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let decay = T::of(lr * cfg.weight_decay);
    let step_size = T::of(lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(cfg.eps);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let i = id.index();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mv, &gv) in m.iter_mut().zip(g) {
            *mv = b1 * *mv + one_b1 * gv;
        }
        let v = state.v[i].data_mut();
        for (vv, &gv) in v.iter_mut().zip(g) {
            *vv = b2 * *vv + one_b2 * gv * gv;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        let p = store.get_mut(id).data_mut();
        for ((pv, &mv), &vv) in p.iter_mut().zip(m).zip(v) {
            *pv -= decay * *pv;
            *pv -= step_size * mv / ((vv.sqrt() * inv_sqrt_bc2) + eps);
        }
    }
    Ok(())
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}
