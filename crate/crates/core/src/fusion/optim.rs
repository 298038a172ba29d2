use super::params::HeadParams;
use super::{check_len, FusionError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers share the parameters' layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub lr: f64,
    pub m: HeadParams,
    pub v: HeadParams,
}

impl AdamState {
    pub fn new(params: &HeadParams, lr: f64) -> Self {
        Self {
            t: 0,
            lr,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut HeadParams,
    grads: &HeadParams,
    state: &mut AdamState,
) -> Result<(), FusionError> {
    for ((p, g), (m, v)) in params
        .tensors()
        .iter()
        .zip(grads.tensors())
        .zip(state.m.tensors().iter().zip(state.v.tensors()))
    {
        check_len("gradient", p.len(), g.len())?;
        check_len("adam m", p.len(), m.len())?;
        check_len("adam v", p.len(), v.len())?;
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = state.lr;
    for ((p, g), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()))
    {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
