//! Adam optimizer with bias correction.

use crate::error::{Error, Result};

/// Optimizer hyperparameters. Only the first moment decay and the learning
/// rate are externally constrained; the rest are the canonical defaults.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
        }
    }
}

/// One Adam update on a single parameter tensor. `name` is only used for
/// diagnostics when a non-finite gradient shows up.
pub fn adam_step(
    name: &str,
    param: &mut [f32],
    grad: &[f32],
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step size mismatch for {name}: param {}, grad {}, state {}",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            name: name.to_string(),
        });
    }
    state.t += 1;
    let b1 = hp.beta1 as f64;
    let b2 = hp.beta2 as f64;
    let corr1 = 1.0 - b1.powi(state.t as i32);
    let corr2 = 1.0 - b2.powi(state.t as i32);
    let lr = hp.lr as f64;
    let eps = hp.eps as f64;
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let m_hat = m / corr1;
        let v_hat = v / corr2;
        param[i] = (param[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
    }
    Ok(())
}
