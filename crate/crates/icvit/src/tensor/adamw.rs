//! AdamW with decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moments for one ordered parameter list, plus the shared
/// step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One optimizer step over an ordered parameter list. `grads[i]` may be
/// `None` for parameters that did not reach the loss this step; they still
/// receive weight decay (moments untouched).
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&[f32]>],
    state: &mut AdamState,
    lr: f32,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);

    for (i, param) in params.iter_mut().enumerate() {
        if state.m[i].len() != param.numel() {
            return Err(Error::Contract(format!(
                "adamw: moment slot {i} has {} elements, param has {}",
                state.m[i].len(),
                param.numel()
            )));
        }
        let data = param.data_mut();
        // decoupled decay: applied to the weight, never to the moments
        if hyper.weight_decay != 0.0 {
            let f = lr * hyper.weight_decay;
            for w in data.iter_mut() {
                *w -= f * *w;
            }
        }
        let Some(g) = grads[i] else { continue };
        if g.len() != data.len() {
            return Err(Error::Contract(format!(
                "adamw: grad {i} has {} elements, param has {}",
                g.len(),
                data.len()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..data.len() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
