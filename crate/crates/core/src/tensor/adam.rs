use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::params::{Gradients, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
///
/// Parameters without a gradient are left untouched (their moments do not
/// decay). The whole step is rejected before any write if a gradient is
/// non-finite.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, grads: &Gradients<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, model has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape(format!("gradient of `{}`", params.name(id))));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", params.name(id))));
            }
        }
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let step_size = T::from_f64(lr / bc1);
    let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(cfg.eps);
    for id in params.ids() {
        let Some(g) = grads.get(id) else { continue };
        let i = id.index();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            p[j] = p[j] - step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}
