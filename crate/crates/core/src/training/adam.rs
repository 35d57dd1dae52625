use super::backprop::Gradients;
use crate::network::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Step-decayed learning rate: `lr0 * decay_factor^floor(step / decay_every)`.
pub fn lr_schedule(step: u64, lr0: f64, decay_factor: f64, decay_every: u64) -> f64 {
    let decays = step.checked_div(decay_every).unwrap_or(0);
    lr0 * decay_factor.powi(decays as i32)
}

/// Adam moment accumulators, laid out like the learnable tensors of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<usize> = params
            .tensors()
            .iter()
            .filter(|t| t.learnable)
            .map(|t| t.data.len())
            .collect();
        OptimizerState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_update(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (((w, g), m), v) in params
        .learnable_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..w.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}
