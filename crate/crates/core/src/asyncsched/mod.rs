//! Shadow pipeline for preconditioner refreshes.
//!
//! A training thread owns a [`ShadowRuntime`] holding its replicas of the
//! preconditioner blocks. Every `pf` steps a block's factors are copied into
//! a snapshot and handed to a shared [`WorkerPool`]; the training thread
//! keeps consuming the previously installed preconditioner until the job is
//! installed at a step boundary. A staleness barrier bounds how old the
//! consumed preconditioner may get.
//!
//! Time is virtual and per rank: a job's completion time is decided by a
//! deterministic model of the rank's worker pool, while the arithmetic runs
//! on real threads. Installing a job whose modeled completion time has
//! passed blocks until the real result arrives, so traces and trajectories
//! do not depend on OS scheduling.

mod pool;
mod runtime;
mod trace;

pub use pool::{JobDone, WorkerPool};
pub use runtime::{HookOutcome, RuntimeConfig, ShadowRuntime, StepAccount};
pub use trace::{merge_traces, read_jsonl, write_jsonl, EventKind, SyncAction, TraceBuffer, TraceEvent};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::precond::PrecondError;
use crate::tierstore::TierError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HookKind {
    ForwardPost,
    BackwardPre,
    StepEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookEvent {
    pub kind: HookKind,
    pub module_id: usize,
    pub step: u64,
}

impl HookEvent {
    pub fn new(kind: HookKind, module_id: usize, step: u64) -> Self {
        Self { kind, module_id, step }
    }
}

/// `s`: steps a pending refresh may age before the consumer waits for it.
/// `pf`: steps between refresh dispatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessPolicy {
    pub s: u64,
    pub pf: u64,
}

impl StalenessPolicy {
    pub fn new(s: u64, pf: u64) -> Self {
        assert!(pf >= 1, "pf must be at least 1");
        Self { s, pf }
    }

    /// Largest admissible gap between a consuming step and the snapshot
    /// step of the preconditioner it consumes.
    pub fn max_consumed_age(&self) -> u64 {
        (self.s + 1) * self.pf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Installed,
}

/// Refresh work item as tracked by the dispatching runtime.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsyncJob {
    pub job_id: u64,
    pub block_id: u32,
    pub dispatch_step: u64,
    pub status: JobStatus,
    pub dispatch_checksum: u64,
    /// Modeled start and completion times on the rank's clock.
    pub start_us: u64,
    pub done_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FreshnessRecord {
    pub block_id: u32,
    pub installed_version: u64,
    pub dispatch_step_of_pending: Option<u64>,
    pub last_install_step: Option<u64>,
    /// Snapshot step behind the installed version.
    pub installed_snapshot_step: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PoolStats {
    pub dispatched: u64,
    pub coalesced: u64,
    pub completed: u64,
    pub installed: u64,
    pub barrier_waits: u64,
    pub wait_time_us: u64,
    pub queue_depth: u64,
    pub max_queue_depth: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedError {
    #[error(transparent)]
    Precond(#[from] PrecondError),
    #[error(transparent)]
    Tier(#[from] TierError),
    #[error("refresh worker pool is down")]
    WorkerPoolDown,
    #[error("snapshot of block {block} changed between dispatch ({dispatch:#x}) and job start ({start:#x})")]
    SnapshotCorrupted { block: u32, dispatch: u64, start: u64 },
    #[error("unknown block {0}")]
    UnknownBlock(u32),
}

pub type Result<T> = std::result::Result<T, SchedError>;
