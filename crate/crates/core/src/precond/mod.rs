//! Optimizer state and update rules: AdamW, two-sided Shampoo and rotated
//! Adam (SOAP), plus parameter blocking under a maximum factor dimension.
//!
//! Factor accumulation and preconditioning mutate a block on its owning
//! training thread. Refreshing inverse roots or eigenbases is split into a
//! pure computation over a [`FactorSnapshot`] (safe on any thread) and an
//! install step that bumps the block's version.

mod adam;
mod block;
mod blocking;

pub use adam::{adamw_step, apply_update, AdamState};
pub use block::{refresh_inverse, FactorSnapshot, PrecondBlock, RefreshResult};
pub use blocking::{partition_param, BlockSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::densela::LinalgError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    AdamW,
    Shampoo,
    #[serde(rename = "SOAP", alias = "Soap")]
    Soap,
}

impl Method {
    pub fn is_second_order(self) -> bool {
        !matches!(self, Method::AdamW)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Accumulation {
    Sum,
    #[serde(rename = "EMA")]
    Ema(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    #[serde(alias = "precondition_frequency")]
    pub pf: u64,
    /// Factor statistics rule; `None` picks Sum for Shampoo and EMA(0.95)
    /// for SOAP.
    pub accumulation: Option<Accumulation>,
    /// Relative damping: the absolute value added to a factor's diagonal is
    /// `damping * trace / dim`.
    pub damping: f64,
    pub block_dim_limit: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: Method::Shampoo,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            pf: 10,
            accumulation: None,
            damping: 1e-8,
            block_dim_limit: 2048,
        }
    }
}

impl OptimizerConfig {
    pub fn accumulation_rule(&self) -> Accumulation {
        self.accumulation.unwrap_or(match self.method {
            Method::Soap => Accumulation::Ema(0.95),
            _ => Accumulation::Sum,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PrecondError::InvalidConfig(m.to_string()));
        if self.pf == 0 {
            return bad("pf must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if let Accumulation::Ema(b) = self.accumulation_rule() {
            if !(0.0..1.0).contains(&b) {
                return bad("EMA accumulation beta must lie in [0, 1)");
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return bad("eps must be finite and non-negative");
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return bad("damping must be finite and non-negative");
        }
        if !self.weight_decay.is_finite() {
            return bad("weight_decay must be finite");
        }
        if self.block_dim_limit == 0 {
            return bad("block_dim_limit must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrecondError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient contains NaN or infinite entries")]
    NonFinite,
    #[error("block {0} has no installed preconditioner yet")]
    StaleUninitialized(u32),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("refresh result does not match the block's method")]
    MethodMismatch,
}

pub type Result<T> = std::result::Result<T, PrecondError>;
