//! Runtime for Kronecker-factored second-order optimizers under tight memory budgets and relaxed coherence.

pub mod asyncsched;
pub mod clock;
pub mod coherence;
pub mod densela;
pub mod harness;
pub mod metrics;
pub mod precond;
pub mod simnet;
pub mod tierstore;
