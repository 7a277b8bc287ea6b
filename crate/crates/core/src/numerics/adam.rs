use serde::{Deserialize, Serialize};

use super::Tensor2;
use crate::error::{Error, Result};

/// Role of a trainable tensor. Only weight matrices carry L2 decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor2,
}

/// `l2 · Σ w²` over weight matrices.
pub fn l2_penalty(params: &[Param], l2: f64) -> f64 {
    params
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| l2 * p.value.sum_squares())
        .sum()
}

/// Adds `2 · l2 · w` to the gradient of every weight matrix.
pub fn add_l2_gradient(params: &[Param], grads: &mut [Tensor2], l2: f64) {
    for (p, g) in params.iter().zip(grads.iter_mut()) {
        if p.kind == ParamKind::Weight && l2 != 0.0 {
            for (gv, pv) in g.data_mut().iter_mut().zip(p.value.data()) {
                *gv += 2.0 * l2 * pv;
            }
        }
    }
}

/// First/second moment accumulators with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl AdamState {
    pub fn new(params: &[Param], lr: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One ADAM update. `grads` are loss gradients without the L2 term; the
/// `2 · l2 · w` decay gradient is added here for weight matrices.
pub fn adam_step(
    params: &mut [Param],
    grads: &[Tensor2],
    state: &mut AdamState,
    l2: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "{} is {:?} but its gradient is {:?}",
                p.name,
                p.value.shape(),
                g.shape()
            )));
        }
        if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at flat index {pos} is {} (step {})",
                p.name,
                g.data()[pos],
                state.step + 1
            )));
        }
    }
    let mut grads = grads.to_vec();
    add_l2_gradient(params, &mut grads, l2);

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
