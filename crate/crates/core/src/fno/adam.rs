//! Adam optimizer over the flat parameter tensors.

use super::model::FnoParams;
use crate::fno::FnoConfig;

/// First/second-moment accumulators mirroring the parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: FnoParams,
    v: FnoParams,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(cfg: &FnoConfig) -> Self {
        Self {
            m: FnoParams::zeros(cfg),
            v: FnoParams::zeros(cfg),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. A non-finite gradient skips the
/// update (parameters and moments untouched) and returns `false`.
pub fn adam_step(params: &mut FnoParams, grads: &FnoParams, state: &mut AdamState, lr: f64) -> bool {
    if !grads.is_finite() {
        log::warn!("adam_step: non-finite gradient at step {}, update skipped", state.step + 1);
        return false;
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);

    let mut p_flat = params.flat_mut();
    let g_flat = grads.flat();
    let mut m_flat = state.m.flat_mut();
    let mut v_flat = state.v.flat_mut();
    for t_idx in 0..p_flat.len() {
        let p = &mut p_flat[t_idx];
        let g = g_flat[t_idx];
        let m = &mut m_flat[t_idx];
        let v = &mut v_flat[t_idx];
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    true
}
