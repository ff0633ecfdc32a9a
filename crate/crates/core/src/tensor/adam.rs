//! Adam optimizer with bias correction.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moment estimates plus a shared step count.
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Apply one Adam update to every named parameter. Moment buffers are
/// created lazily and stay shape-congruent with their parameters.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
) -> Result<()> {
    for (name, _) in params.iter() {
        if let Some(g) = grads.get(name) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGrad { param: name.clone() });
            }
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let c = state.config;
    let bias1 = 1.0 - c.beta1.powf(t);
    let bias2 = 1.0 - c.beta2.powf(t);

    for (name, tensor) in params.iter_mut() {
        let Some(grad) = grads.get(name) else { continue };
        let entry = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; tensor.numel()],
            v: vec![0.0; tensor.numel()],
        });
        debug_assert_eq!(entry.m.len(), tensor.numel());
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            entry.m[i] = c.beta1 * entry.m[i] + (1.0 - c.beta1) * g;
            entry.v[i] = c.beta2 * entry.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = entry.m[i] / bias1;
            let v_hat = entry.v[i] / bias2;
            data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}
