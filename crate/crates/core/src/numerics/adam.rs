//! Bias-corrected Adam optimizer state and update step.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
    hyper: AdamHyper,
}

impl AdamState {
    pub fn new(shape: &[usize], hyper: AdamHyper) -> Self {
        AdamState {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut Tensor, grads: &Tensor, state: &mut AdamState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.first_moment) {
        return Err(Error::InvalidInput(format!(
            "adam_step shape mismatch: params {:?}, grads {:?}, state {:?}",
            params.shape(),
            grads.shape(),
            state.first_moment.shape()
        )));
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    let p = params.data_mut();
    let g = grads.data();
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}
