//! SGD with momentum over two learning-rate groups and polynomial decay.

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub init_lr: f64,
    pub max_epoch: usize,
    pub power: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { init_lr: 0.001, max_epoch: 1000, power: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub schedule: Schedule,
    pub lambda_cnn: f64,
    pub lambda_trans: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { schedule: Schedule::default(), lambda_cnn: 1.0, lambda_trans: 0.1, momentum: 0.99, weight_decay: 3e-5, nesterov: false }
    }
}

impl OptimConfig {
    pub fn lambda(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Cnn => self.lambda_cnn,
            ParamGroup::Transformer => self.lambda_trans,
        }
    }

    pub fn lr(&self, epoch: usize, group: ParamGroup) -> Result<f64> {
        poly_lr(epoch, self.lambda(group), &self.schedule)
    }
}

/// `λ · init_lr · (1 − e/MAX)^power`
pub fn poly_lr(epoch: usize, lambda: f64, s: &Schedule) -> Result<f64> {
    if epoch > s.max_epoch || s.max_epoch == 0 {
        return Err(Error::Range(format!("epoch {epoch} outside 0..={}", s.max_epoch)));
    }
    let base = s.init_lr * (1.0 - epoch as f64 / s.max_epoch as f64).powf(s.power);
    Ok(lambda * base)
}

/// One momentum buffer per parameter.
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        SgdState { velocity: store.zeroed_like() }
    }
}

/// `v ← μv + g + wd·p; p ← p − lr·v` (Nesterov: `p ← p − lr·(g + wd·p + μv)`),
/// with per-group learning rates. Gradients are read from each parameter's
/// gradient buffer; parameters without one are left unchanged.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut SgdState<T>, cfg: &OptimConfig, lr_cnn: f64, lr_trans: f64) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::Spec(format!("{} momentum buffers for {} parameters", state.velocity.len(), store.len())));
    }
    // check everything first so a bad gradient leaves the model untouched
    for p in store.params() {
        if let Some(g) = p.tensor.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
            }
        }
    }
    let mu = T::c(cfg.momentum);
    for (p, vel) in store.params_mut().iter_mut().zip(&mut state.velocity) {
        let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else { continue };
        let lr = T::c(match p.group {
            ParamGroup::Cnn => lr_cnn,
            ParamGroup::Transformer => lr_trans,
        });
        let wd = T::c(if p.decay { cfg.weight_decay } else { 0.0 });
        let v = vel.data_mut();
        let w = p.tensor.data_mut();
        for i in 0..w.len() {
            let d = grad[i] + wd * w[i];
            v[i] = mu * v[i] + d;
            w[i] -= lr * if cfg.nesterov { d + mu * v[i] } else { v[i] };
        }
    }
    Ok(())
}

/// Parameter names grouped for auditing: `(name, group, decay, scalars)`.
pub fn group_audit<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, ParamGroup, bool, usize)> {
    store.params().iter().map(|p| (p.name.clone(), p.group, p.decay, p.tensor.numel())).collect()
}
