//! Adam with bias correction.

use crate::net::model::Params;
use crate::net::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let m = params.entries().iter().map(|(_, t)| Tensor::zeros(t.shape)).collect();
        let v = params.entries().iter().map(|(_, t)| Tensor::zeros(t.shape)).collect();
        AdamState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`. `grads` must align
/// with the parameter order; zero gradients leave parameters unchanged.
#[allow(clippy::needless_range_loop)] // four parallel arrays walk together
pub fn adam_step(params: &mut Params, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(grads.len(), params.len(), "gradient list must align with parameters");
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grads.len() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params.tensor_mut(i);
        debug_assert_eq!(g.shape, p.shape);
        for j in 0..g.data.len() {
            let gj = g.data[j];
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * gj;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m.data[j] / bc1;
            let v_hat = v.data[j] / bc2;
            p.data[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
