//! Polynomial learning-rate decay and Nesterov momentum with L2 decay.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::invalid(format!(
            "iteration {iter} beyond max_iter {max_iter}"
        )));
    }
    if max_iter == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One look-ahead Nesterov update of a flat buffer:
/// `g' = g + wd * w`, `v <- mu * v - lr * g'`, `w <- w + mu * v - lr * g'`.
pub fn nesterov_update<T: Scalar>(
    w: &mut [T],
    g: &[T],
    v: &mut [T],
    cfg: StepConfig,
    decayed: bool,
) {
    let lr = T::from_f64_lossy(cfg.lr);
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(if decayed { cfg.weight_decay } else { 0.0 });
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let g = g + wd * *w;
        *v = mu * *v - lr * g;
        *w = *w + mu * *v - lr * g;
    }
}

/// Per-parameter gradients keyed by name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Gradients of every trainable parameter, zeros where the loss did not
/// reach.
pub fn collect_grads<T: Scalar>(params: &ParamStore<T>, grads: &Gradients<T>) -> GradMap<T> {
    params
        .iter()
        .filter(|(_, e)| e.kind.trainable())
        .map(|(name, e)| {
            let g = grads
                .param(name)
                .unwrap_or_else(|| Tensor::zeros(e.tensor.shape()));
            (name.to_string(), g)
        })
        .collect()
}

/// Velocity buffers, one per trainable parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub velocity: BTreeMap<String, Vec<T>>,
    pub iter: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let velocity = params
            .iter()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(name, e)| (name.to_string(), vec![T::zero(); e.tensor.numel()]))
            .collect();
        OptimizerState { velocity, iter: 0 }
    }
}

/// Updates every trainable parameter in name order. Fails without touching
/// anything when a gradient is missing, misshapen or non-finite.
pub fn nesterov_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut OptimizerState<T>,
    cfg: StepConfig,
) -> Result<()> {
    for (name, entry) in params.iter().filter(|(_, e)| e.kind.trainable()) {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != entry.tensor.shape() {
            return Err(Error::invalid(format!(
                "gradient of `{name}` has shape {} but the parameter is {}",
                g.shape(),
                entry.tensor.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{name}` at element {i}, iteration {}",
                state.iter
            )));
        }
    }
    for (name, entry) in params.iter_mut() {
        if !entry.kind.trainable() {
            continue;
        }
        let decayed = entry.decayed();
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); entry.tensor.numel()]);
        nesterov_update(entry.tensor.data_mut(), grads[name].data(), v, cfg, decayed);
    }
    state.iter += 1;
    Ok(())
}

/// `0.5 * sum(w^2)` over decayed parameters.
pub fn l2_penalty<T: Scalar>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .filter(|(_, e)| e.decayed())
        .flat_map(|(_, e)| e.tensor.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        * 0.5
}
