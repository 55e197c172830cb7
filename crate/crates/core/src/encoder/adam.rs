use serde::{Deserialize, Serialize};

use super::params::ParamBlocks;
use crate::error::{Error, Result};

/// Moment estimates for Adam, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &impl ParamBlocks) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        AdamState {
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched if any
/// gradient entry is not finite.
pub fn adam_step<P: ParamBlocks>(
    params: &mut P,
    grad: &P,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let grads = grad.blocks();
    if grads.len() != state.m.len()
        || grads.iter().zip(&state.m).any(|(g, m)| g.len() != m.len())
    {
        return Err(Error::Shape("gradient does not match optimizer state".into()));
    }
    for (b, g) in grads.iter().enumerate() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient block {b} entry {i} is {}",
                g[i]
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, g), m), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
