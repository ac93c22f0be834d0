//! Deterministic data-parallel training over simulated ranks.
//!
//! Each rank runs on its own thread with a virtual clock. Per step it
//! computes its shard gradient, fires the module hooks, averages gradients
//! over the simulated network, clips, and updates every parameter block
//! through the shadow refresh pipeline; the step ends with installs and a
//! coherence tick.

mod config;
mod output;
mod run;
mod sweep;
mod task;

pub use config::{Activation, ModelSpec, RunConfig, SchedConfig, TaskConfig, TopologyConfig};
pub use output::{read_loss_csv, read_summary, write_outputs, LossRow};
pub use run::{run_training, RunResult, RunSummary};
pub use sweep::{sweep, SweepAxis, SweepRow, SweepTable};
pub use task::{
    finite_difference_error, gradient_check, init_weights, mlp_logits, mlp_loss_grad, shard_range, ClassifierTask,
    QuadraticTask, ShardGrad, Task,
};

use thiserror::Error;

use crate::asyncsched::SchedError;
use crate::coherence::CoherenceError;
use crate::metrics::MetricsError;
use crate::precond::PrecondError;
use crate::simnet::NetError;
use crate::tierstore::TierError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Precond(#[from] PrecondError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Coherence(#[from] CoherenceError),
    #[error(transparent)]
    Tier(#[from] TierError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invariant audit failed: {0}")]
    Audit(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl HarnessError {
    /// Errors caused by the run's configuration rather than its execution.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            HarnessError::ConfigInvalid(_)
                | HarnessError::Precond(PrecondError::InvalidConfig(_))
                | HarnessError::Coherence(CoherenceError::InvalidLayout(_))
        )
    }

    /// Errors raised when a runtime invariant check fails.
    pub fn is_audit_failure(&self) -> bool {
        matches!(
            self,
            HarnessError::Audit(_)
                | HarnessError::Sched(SchedError::SnapshotCorrupted { .. })
                | HarnessError::Tier(TierError::ChecksumMismatch { .. } | TierError::AuditMismatch(_))
        )
    }

    /// Process exit code: 2 for config errors, 3 for audit failures, 1
    /// otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_config_error() {
            2
        } else if self.is_audit_failure() {
            3
        } else {
            1
        }
    }
}
