use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero. If any
/// gradient is non-finite the step is aborted and nothing is modified.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (id, name, p) in params.iter() {
        if let Some(g) = &grads[id.0] {
            if g.shape() != p.shape() {
                return Err(Error::invalid(format!(
                    "adam: gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} at flat index {pos} is {}",
                    g.data()[pos]
                )));
            }
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = params.get_mut(id).data_mut();
        match &grads[id.0] {
            Some(g) => {
                for k in 0..p.len() {
                    let gk = g.data()[k];
                    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                    p[k] -= cfg.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
                }
            }
            None => {
                for k in 0..p.len() {
                    m[k] *= cfg.beta1;
                    v[k] *= cfg.beta2;
                    p[k] -= cfg.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}
