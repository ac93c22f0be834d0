use serde::{Deserialize, Serialize};

use super::{OptimizerConfig, PrecondError, Result};
use crate::densela::DenseMatrix;

/// Elementwise Adam moments for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed steps; bias correction uses `t` after increment.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Advances the moments with `g` and returns the bias-corrected Adam
/// direction `m_hat / (sqrt(v_hat) + eps)`. Weight decay is not folded in;
/// see [`apply_update`].
pub fn adamw_step(state: &mut AdamState, g: &DenseMatrix, cfg: &OptimizerConfig) -> Result<DenseMatrix> {
    if !g.is_finite() {
        return Err(PrecondError::NonFinite);
    }
    let n = g.as_slice().len();
    if state.m.len() != n {
        return Err(PrecondError::ShapeMismatch(format!(
            "Adam state holds {} values, gradient {}",
            state.m.len(),
            n
        )));
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let mut out = vec![0.0; n];
    for (k, &gk) in g.as_slice().iter().enumerate() {
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * gk;
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * gk * gk;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        out[k] = m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(DenseMatrix::from_vec_unchecked(g.rows(), g.cols(), out))
}

/// `theta <- theta - lr * (update + weight_decay * theta)`.
pub fn apply_update(theta: &mut DenseMatrix, update: &DenseMatrix, lr: f64, weight_decay: f64) -> Result<()> {
    if theta.shape() != update.shape() {
        return Err(PrecondError::ShapeMismatch(format!(
            "parameter {:?} vs update {:?}",
            theta.shape(),
            update.shape()
        )));
    }
    if !update.is_finite() {
        return Err(PrecondError::NonFinite);
    }
    for (t, &u) in theta.as_mut_slice().iter_mut().zip(update.as_slice()) {
        *t -= lr * (u + weight_decay * *t);
    }
    if !theta.is_finite() {
        return Err(PrecondError::NonFinite);
    }
    Ok(())
}
