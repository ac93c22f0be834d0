use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender, TryRecvError};
use serde::{Deserialize, Serialize};

use super::pool::{JobDone, PoolJob, WorkerPool};
use super::trace::{EventKind, TraceBuffer, TraceEvent};
use super::{
    AsyncJob, FreshnessRecord, HookEvent, HookKind, JobStatus, PoolStats, Result, SchedError, StalenessPolicy,
};
use crate::clock::SimClock;
use crate::coherence::Replicas;
use crate::densela::DenseMatrix;
use crate::precond::{Method, OptimizerConfig, PrecondBlock, PrecondError};
use crate::tierstore::{TensorKey, TensorRole, TierError, TierStore, TierTag};

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    pub rank: usize,
    pub optimizer: OptimizerConfig,
    pub policy: StalenessPolicy,
    /// Workers in the modeled pool that decides job completion times.
    pub virtual_workers: usize,
    /// Modeled duration of one refresh job.
    pub job_cost_us: u64,
    /// Extra real sleep per job, for exercising slow workers.
    pub real_job_delay: Duration,
    /// Transfers installed per ForwardPost hook.
    pub hook_drain_budget: usize,
    /// Keep installed preconditioner state in Cold between uses.
    pub offload_inverse: bool,
}

impl RuntimeConfig {
    pub fn new(rank: usize, optimizer: OptimizerConfig, s: u64) -> Self {
        let pf = optimizer.pf;
        Self {
            rank,
            optimizer,
            policy: StalenessPolicy::new(s, pf),
            virtual_workers: 1,
            job_cost_us: 0,
            real_job_delay: Duration::ZERO,
            hook_drain_budget: 4,
            offload_inverse: false,
        }
    }
}

/// Exposed time charged to the current step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAccount {
    pub barrier_wait_us: u64,
    pub install_us: u64,
    pub page_in_us: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HookOutcome {
    pub drained: usize,
    pub prefetched: usize,
    pub installed: usize,
}

struct Slot {
    block: PrecondBlock,
    module: usize,
    pending: Option<AsyncJob>,
    fresh: FreshnessRecord,
    /// Store versions of the payload halves the block currently holds.
    loaded: [u64; 2],
}

/// Per-rank owner of preconditioner replicas and their refresh pipeline.
pub struct ShadowRuntime {
    cfg: RuntimeConfig,
    slots: Vec<Slot>,
    index: HashMap<u32, usize>,
    pool: Arc<WorkerPool>,
    store: Arc<TierStore>,
    clock: SimClock,
    reply_tx: Sender<JobDone>,
    reply_rx: Receiver<JobDone>,
    arrived: HashMap<u64, JobDone>,
    free_at: Vec<u64>,
    next_job: u64,
    stats: PoolStats,
    trace: TraceBuffer,
    account: StepAccount,
    step: u64,
    reserved_hot: u64,
}

impl std::fmt::Debug for ShadowRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShadowRuntime")
            .field("rank", &self.cfg.rank)
            .field("blocks", &self.slots.len())
            .field("stats", &self.stats)
            .finish()
    }
}

fn payload_keys(block: u32, method: Method) -> [TensorKey; 2] {
    match method {
        Method::Soap => [
            TensorKey::new(block, TensorRole::BasisL),
            TensorKey::new(block, TensorRole::BasisR),
        ],
        _ => [
            TensorKey::new(block, TensorRole::InvL),
            TensorKey::new(block, TensorRole::InvR),
        ],
    }
}

fn left_len(block: &PrecondBlock) -> usize {
    let m = block.shape().0;
    match block.method {
        Method::Soap => m * m,
        _ => m * (m + 1) / 2,
    }
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_to_f64s(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Training-owned bytes of a block: factors, plus rotated moments for SOAP.
fn factor_bytes(block: &PrecondBlock) -> u64 {
    let (m, n) = block.shape();
    let mut b = (m * m + n * n) as u64 * 8;
    if block.method == Method::Soap {
        b += 2 * (m * n) as u64 * 8;
    }
    b
}

impl ShadowRuntime {
    /// `blocks` pairs each block with the module whose hooks stage it.
    /// Factor memory is reserved in the Hot tier of `store`.
    pub fn new(
        cfg: RuntimeConfig,
        blocks: Vec<(PrecondBlock, usize)>,
        pool: Arc<WorkerPool>,
        store: Arc<TierStore>,
        clock: SimClock,
    ) -> Result<Self> {
        cfg.optimizer.validate()?;
        let reserved_hot: u64 = blocks.iter().map(|(b, _)| factor_bytes(b)).sum();
        store.reserve(TierTag::Hot, reserved_hot)?;
        let mut index = HashMap::new();
        let slots: Vec<Slot> = blocks
            .into_iter()
            .enumerate()
            .map(|(i, (block, module))| {
                index.insert(block.id, i);
                Slot {
                    fresh: FreshnessRecord {
                        block_id: block.id,
                        ..Default::default()
                    },
                    block,
                    module,
                    pending: None,
                    loaded: [0; 2],
                }
            })
            .collect();
        let (reply_tx, reply_rx) = unbounded();
        Ok(Self {
            free_at: vec![clock.now_us(); cfg.virtual_workers.max(1)],
            cfg,
            slots,
            index,
            pool,
            store,
            clock,
            reply_tx,
            reply_rx,
            arrived: HashMap::new(),
            next_job: 1,
            stats: PoolStats::default(),
            trace: TraceBuffer::default(),
            account: StepAccount::default(),
            step: 0,
            reserved_hot,
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn store(&self) -> &Arc<TierStore> {
        &self.store
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn account(&self) -> StepAccount {
        self.account
    }

    pub fn trace(&self) -> &TraceBuffer {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut TraceBuffer {
        &mut self.trace
    }

    pub fn block_ids(&self) -> Vec<u32> {
        self.slots.iter().map(|s| s.block.id).collect()
    }

    pub fn block(&self, id: u32) -> Result<&PrecondBlock> {
        Ok(&self.slots[self.slot_of(id)?].block)
    }

    pub fn freshness(&self, id: u32) -> Result<FreshnessRecord> {
        Ok(self.slots[self.slot_of(id)?].fresh)
    }

    pub fn pending_job(&self, id: u32) -> Result<Option<AsyncJob>> {
        let s = &self.slots[self.slot_of(id)?];
        Ok(s.pending.clone().map(|mut j| {
            j.status = self.status_of(&j);
            j
        }))
    }

    fn slot_of(&self, id: u32) -> Result<usize> {
        self.index.get(&id).copied().ok_or(SchedError::UnknownBlock(id))
    }

    fn emit(&mut self, ev: TraceEvent) {
        self.trace.emit(ev);
    }

    fn ev(&self, kind: EventKind) -> TraceEvent {
        TraceEvent::new(self.step, self.cfg.rank, kind, self.clock.now_us())
    }

    fn status_of(&self, job: &AsyncJob) -> JobStatus {
        let now = self.clock.now_us();
        if self.clock.is_virtual() {
            if now >= job.done_us {
                JobStatus::Done
            } else if now >= job.start_us {
                JobStatus::Running
            } else {
                JobStatus::Queued
            }
        } else if self.arrived.contains_key(&job.job_id) {
            JobStatus::Done
        } else {
            JobStatus::Running
        }
    }

    fn poll_replies(&mut self) -> Result<()> {
        loop {
            match self.reply_rx.try_recv() {
                Ok(done) => {
                    self.arrived.insert(done.job_id, done);
                }
                Err(TryRecvError::Empty) => return Ok(()),
                Err(TryRecvError::Disconnected) => return Err(SchedError::WorkerPoolDown),
            }
        }
    }

    fn await_reply(&mut self, job_id: u64) -> Result<JobDone> {
        loop {
            if let Some(done) = self.arrived.remove(&job_id) {
                return Ok(done);
            }
            let done = self.reply_rx.recv().map_err(|_| SchedError::WorkerPoolDown)?;
            self.arrived.insert(done.job_id, done);
        }
    }

    /// Starts a step: resets the per-step account and stamps the store.
    pub fn begin_step(&mut self, step: u64) {
        self.step = step;
        self.account = StepAccount::default();
        self.store.set_step(step);
    }

    pub fn on_hook(&mut self, ev: HookEvent) -> Result<HookOutcome> {
        self.step = ev.step;
        let mut out = HookOutcome::default();
        match ev.kind {
            HookKind::ForwardPost => {
                out.drained = self.store.drain_ready(self.cfg.hook_drain_budget);
                let e = self.ev(EventKind::ForwardPost).module(ev.module_id).count(out.drained as u64);
                self.emit(e);
            }
            HookKind::BackwardPre => {
                let mut keys = Vec::new();
                for s in self.slots.iter().filter(|s| s.module == ev.module_id) {
                    if s.fresh.installed_version > 0 {
                        keys.extend(payload_keys(s.block.id, s.block.method));
                    }
                }
                for k in keys {
                    if self.store.entry(&k).map(|e| e.tier != TierTag::Hot).unwrap_or(false) {
                        let t = self.store.prefetch(&k, TierTag::Hot)?;
                        if t.0 != 0 {
                            out.prefetched += 1;
                            let e = self.ev(EventKind::Prefetch).block(k.block).module(ev.module_id);
                            self.emit(e);
                        }
                    }
                }
                let e = self.ev(EventKind::BackwardPre).module(ev.module_id).count(out.prefetched as u64);
                self.emit(e);
            }
            HookKind::StepEnd => {
                out.installed = self.install_ready(ev.step)?;
                let e = self.ev(EventKind::StepEnd).count(out.installed as u64);
                self.emit(e);
            }
        }
        Ok(out)
    }

    pub fn accumulate(&mut self, id: u32, g: &DenseMatrix) -> Result<()> {
        let i = self.slot_of(id)?;
        let rule = self.cfg.optimizer.accumulation_rule();
        self.slots[i].block.accumulate_factors(g, rule)?;
        Ok(())
    }

    /// Dispatches a refresh of `id` from a snapshot of its current factors
    /// when `step` is a refresh step. A refresh step that finds a job still
    /// pending either installs it first, when the staleness bound already
    /// forces a wait at `step`, or is coalesced into it. Returns whether a
    /// job was submitted.
    pub fn maybe_dispatch(&mut self, id: u32, step: u64) -> Result<bool> {
        let i = self.slot_of(id)?;
        if step % self.cfg.policy.pf != 0 {
            return Ok(false);
        }
        if self.slots[i].pending.is_some() {
            // A job this step would have to wait for anyway is installed
            // before its successor is dispatched; otherwise the new snapshot
            // is dropped.
            if !self.must_wait(id, step)? {
                self.stats.coalesced += 1;
                return Ok(false);
            }
            self.staleness_barrier(id, step)?;
        }
        let snap = Arc::new(self.slots[i].block.snapshot(step, &self.cfg.optimizer));
        let checksum = snap.checksum();
        let now = self.clock.now_us();
        let (w, free) = self
            .free_at
            .iter()
            .enumerate()
            .min_by_key(|(_, t)| **t)
            .map(|(w, t)| (w, *t))
            .unwrap();
        let start_us = now.max(free);
        let done_us = start_us + self.cfg.job_cost_us;
        self.free_at[w] = done_us;
        let job_id = self.next_job;
        self.next_job += 1;
        let submitted = self.pool.submit(PoolJob {
            job_id,
            snapshot: snap,
            real_delay: self.cfg.real_job_delay,
            reply: self.reply_tx.clone(),
        });
        if !submitted {
            return Err(SchedError::WorkerPoolDown);
        }
        let job = AsyncJob {
            job_id,
            block_id: id,
            dispatch_step: step,
            status: JobStatus::Queued,
            dispatch_checksum: checksum,
            start_us,
            done_us,
        };
        let version = self.slots[i].fresh.installed_version;
        self.slots[i].pending = Some(job);
        self.slots[i].fresh.dispatch_step_of_pending = Some(step);
        self.stats.dispatched += 1;
        let depth = self
            .slots
            .iter()
            .filter_map(|s| s.pending.as_ref())
            .filter(|j| j.start_us > now)
            .count() as u64;
        self.stats.queue_depth = depth;
        self.stats.max_queue_depth = self.stats.max_queue_depth.max(depth);
        let e = self.ev(EventKind::Dispatch).block(id).version(version).snapshot(step);
        self.emit(e);
        Ok(true)
    }

    /// Whether consuming `id` at `step` has to wait for its pending job:
    /// the block has never been installed, the job is older than `S`
    /// steps, or the installed state would exceed the consumed-age bound.
    pub fn must_wait(&self, id: u32, step: u64) -> Result<bool> {
        let s = &self.slots[self.slot_of(id)?];
        let Some(job) = &s.pending else {
            return Ok(false);
        };
        let pol = self.cfg.policy;
        let never = s.fresh.installed_version == 0;
        let job_age = step.saturating_sub(job.dispatch_step);
        let consumed_age = s
            .fresh
            .installed_snapshot_step
            .map(|t| step.saturating_sub(t))
            .unwrap_or(u64::MAX);
        Ok(never || job_age > pol.s || consumed_age > pol.max_consumed_age())
    }

    /// Enforces the staleness bound before `id` is consumed at `step`,
    /// waiting for and installing the pending job if required. Returns the
    /// modeled wait.
    pub fn staleness_barrier(&mut self, id: u32, step: u64) -> Result<u64> {
        if !self.must_wait(id, step)? {
            return Ok(0);
        }
        let i = self.slot_of(id)?;
        let job = self.slots[i].pending.clone().expect("must_wait implies a pending job");
        let now = self.clock.now_us();
        let wait = if self.clock.is_virtual() {
            job.done_us.saturating_sub(now)
        } else {
            0
        };
        if wait > 0 {
            let e = self.ev(EventKind::BarrierWaitBegin).block(id).snapshot(job.dispatch_step);
            self.emit(e);
            self.clock.advance_to(job.done_us);
        }
        let real_start = std::time::Instant::now();
        self.install_job(i, step)?;
        let wall_wait = if self.clock.is_virtual() {
            wait
        } else {
            real_start.elapsed().as_micros() as u64
        };
        if wait > 0 {
            let e = self.ev(EventKind::BarrierWaitEnd).block(id).snapshot(job.dispatch_step);
            self.emit(e);
        }
        if wall_wait > 0 {
            self.stats.barrier_waits += 1;
            self.stats.wait_time_us += wall_wait;
            self.account.barrier_wait_us += wall_wait;
        }
        Ok(wall_wait)
    }

    /// Installs every pending job that has completed, in block order.
    /// Never waits on a job that is still running.
    pub fn install_ready(&mut self, step: u64) -> Result<usize> {
        self.poll_replies()?;
        let mut n = 0;
        for i in 0..self.slots.len() {
            let ready = match &self.slots[i].pending {
                Some(j) => self.status_of(j) == JobStatus::Done,
                None => false,
            };
            if ready {
                self.install_job(i, step)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Waits for and installs all pending jobs, advancing the clock to
    /// their completion.
    pub fn finish(&mut self, step: u64) -> Result<usize> {
        let mut n = 0;
        for i in 0..self.slots.len() {
            if let Some(j) = &self.slots[i].pending {
                self.clock.advance_to(j.done_us);
                self.install_job(i, step)?;
                n += 1;
            }
        }
        Ok(n)
    }

    fn install_job(&mut self, i: usize, step: u64) -> Result<()> {
        let job = self.slots[i].pending.take().expect("pending job");
        let done = self.await_reply(job.job_id)?;
        self.stats.completed += 1;
        let id = job.block_id;
        let mut e = self.ev(EventKind::JobStart).block(id).snapshot(job.dispatch_step);
        e.t_micros = job.start_us;
        self.emit(e);
        let mut e = self.ev(EventKind::JobDone).block(id).snapshot(job.dispatch_step);
        e.t_micros = job.done_us;
        self.emit(e);
        if done.start_checksum != job.dispatch_checksum {
            return Err(SchedError::SnapshotCorrupted {
                block: id,
                dispatch: job.dispatch_checksum,
                start: done.start_checksum,
            });
        }
        let result = done.result?;
        let slot = &mut self.slots[i];
        slot.block.install(result, job.dispatch_step, step)?;
        slot.fresh.installed_version = slot.block.version;
        slot.fresh.dispatch_step_of_pending = None;
        slot.fresh.last_install_step = Some(step);
        slot.fresh.installed_snapshot_step = Some(job.dispatch_step);
        let version = slot.block.version;
        self.write_payload(i)?;
        self.stats.installed += 1;
        let e = self.ev(EventKind::Install).block(id).version(version).snapshot(job.dispatch_step);
        self.emit(e);
        Ok(())
    }

    /// Writes the block's Host-resident state into the store and stages it
    /// towards Hot, or to Cold when offloading.
    fn write_payload(&mut self, i: usize) -> Result<()> {
        let block = &self.slots[i].block;
        let payload = block.host_payload()?;
        let split = left_len(block);
        let keys = payload_keys(block.id, block.method);
        let halves = [&payload[..split], &payload[split..]];
        let mut cost = 0;
        for (h, (key, half)) in keys.iter().zip(halves).enumerate() {
            let bytes = f64s_to_bytes(half);
            cost += self.store.config().transfer_time_us(bytes.len() as u64);
            let entry = self.store.put(*key, bytes, TierTag::Host)?;
            self.slots[i].loaded[h] = entry.version;
            if self.cfg.offload_inverse {
                self.store.flush(key)?;
                self.store.reclaim(key)?;
            } else {
                self.store.prefetch(key, TierTag::Hot)?;
            }
        }
        self.clock.advance(cost);
        self.account.install_us += cost;
        let block = &mut self.slots[i].block;
        for key in keys {
            let tier = self.store.entry(&key).map(|e| e.tier).unwrap_or(TierTag::Cold);
            block.residency.insert(key.role, tier);
        }
        Ok(())
    }

    /// Makes the stored payload of slot `i` Hot-visible, reloading the
    /// block from it if the store holds a newer version.
    fn stage_for_consume(&mut self, i: usize) -> Result<()> {
        let block = &self.slots[i].block;
        let keys = payload_keys(block.id, block.method);
        let mut reload = false;
        for (h, key) in keys.iter().enumerate() {
            let Some(mut entry) = self.store.entry(key) else {
                continue;
            };
            if entry.tier != TierTag::Hot {
                if let Some(ready) = self.store.transfer_ready_at(key) {
                    let now = self.clock.now_us();
                    if ready > now && self.clock.is_virtual() {
                        self.clock.advance_to(ready);
                        self.account.page_in_us += ready - now;
                    }
                    self.store.drain_ready(usize::MAX);
                    entry = self.store.entry(key).expect("entry present");
                }
            }
            if entry.tier != TierTag::Hot {
                let cost = self.store.config().transfer_time_us(entry.bytes);
                self.clock.advance(cost);
                self.account.page_in_us += cost;
                if entry.tier == TierTag::Cold {
                    self.store.get(key)?;
                }
                match self.store.promote(key, TierTag::Hot) {
                    Ok(()) | Err(TierError::CapacityExhausted { .. }) => {}
                    Err(TierError::InvalidMove { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
                let e = self.ev(EventKind::PageIn).block(key.block);
                self.emit(e);
            }
            if entry.version != self.slots[i].loaded[h] {
                reload = true;
            }
        }
        if reload {
            let mut payload = Vec::new();
            let mut versions = [0; 2];
            for (h, key) in keys.iter().enumerate() {
                payload.extend(bytes_to_f64s(&self.store.get(key)?.0));
                versions[h] = self.store.entry(key).map(|e| e.version).unwrap_or(0);
            }
            self.slots[i].block.load_host_payload(&payload)?;
            self.slots[i].loaded = versions;
        }
        let block = &mut self.slots[i].block;
        for key in keys {
            let tier = self.store.entry(&key).map(|e| e.tier).unwrap_or(TierTag::Cold);
            block.residency.insert(key.role, tier);
        }
        Ok(())
    }

    /// Preconditions `g` with the installed state of `id`.
    pub fn consume(&mut self, id: u32, g: &DenseMatrix, step: u64) -> Result<DenseMatrix> {
        let i = self.slot_of(id)?;
        if self.slots[i].fresh.installed_version == 0 {
            return Err(PrecondError::StaleUninitialized(id).into());
        }
        self.stage_for_consume(i)?;
        let cfg = self.cfg.optimizer.clone();
        let out = self.slots[i].block.precondition(g, &cfg)?;
        let (version, snap) = (self.slots[i].block.version, self.slots[i].block.snapshot_step);
        let mut e = self.ev(EventKind::Consume).block(id).version(version);
        e.step = step;
        if let Some(s) = snap {
            e = e.snapshot(s);
        }
        self.emit(e);
        if self.cfg.offload_inverse {
            let block = &self.slots[i].block;
            for key in payload_keys(block.id, block.method) {
                self.store.flush(&key)?;
                self.store.reclaim(&key)?;
            }
        }
        Ok(out)
    }

    /// Releases the factor reservation taken at construction.
    pub fn shutdown(&mut self) {
        self.store.release_reservation(TierTag::Hot, self.reserved_hot);
        self.reserved_hot = 0;
    }
}

impl Drop for ShadowRuntime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Replicas for ShadowRuntime {
    fn read_replica(&mut self, block_id: u32) -> std::result::Result<Vec<f64>, String> {
        let i = self.slot_of(block_id).map_err(|e| e.to_string())?;
        self.slots[i].block.host_payload().map_err(|e| e.to_string())
    }

    fn write_replica(&mut self, block_id: u32, value: &[f64]) -> std::result::Result<(), String> {
        let i = self.slot_of(block_id).map_err(|e| e.to_string())?;
        self.slots[i].block.load_host_payload(value).map_err(|e| e.to_string())?;
        let install_before = self.account.install_us;
        self.write_payload(i).map_err(|e| e.to_string())?;
        // Coherence writes are charged to communication, not install.
        self.account.install_us = install_before;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precond::partition_param;
    use crate::tierstore::TierConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grad(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(m, n, |_, _| StandardNormal.sample(rng))
    }

    fn setup(method: Method, s: u64, pf: u64, job_cost_us: u64, offload: bool) -> ShadowRuntime {
        let opt = OptimizerConfig {
            method,
            pf,
            ..Default::default()
        };
        let mut cfg = RuntimeConfig::new(0, opt, s);
        cfg.job_cost_us = job_cost_us;
        cfg.offload_inverse = offload;
        let clock = SimClock::virtual_at(0);
        let store = Arc::new(TierStore::new(TierConfig::default(), clock.clone()).unwrap());
        let pool = WorkerPool::new(2).unwrap();
        let blocks = (0..2u32)
            .map(|b| {
                let spec = partition_param(b, (4, 3), 2048).remove(0);
                (PrecondBlock::new(b, spec, method), b as usize)
            })
            .collect();
        ShadowRuntime::new(cfg, blocks, pool, store, clock).unwrap()
    }

    /// One training step of a single block with a fixed compute time.
    fn step(rt: &mut ShadowRuntime, t: u64, g: &DenseMatrix, compute_us: u64) -> DenseMatrix {
        rt.begin_step(t);
        rt.clock().advance(compute_us);
        rt.on_hook(HookEvent::new(HookKind::ForwardPost, 0, t)).unwrap();
        rt.on_hook(HookEvent::new(HookKind::BackwardPre, 0, t)).unwrap();
        rt.accumulate(0, g).unwrap();
        rt.maybe_dispatch(0, t).unwrap();
        rt.staleness_barrier(0, t).unwrap();
        let out = rt.consume(0, g, t).unwrap();
        rt.on_hook(HookEvent::new(HookKind::StepEnd, 0, t)).unwrap();
        out
    }

    #[test]
    fn first_consumption_waits_for_bootstrap() {
        let mut rt = setup(Method::Shampoo, 2, 1, 500, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grad(4, 3, &mut rng);
        step(&mut rt, 0, &g, 100);
        let st = rt.stats();
        assert_eq!(st.barrier_waits, 1);
        assert_eq!(st.wait_time_us, 500);
        assert_eq!(rt.freshness(0).unwrap().installed_snapshot_step, Some(0));
    }

    #[test]
    fn fast_jobs_never_block_and_install_at_step_end() {
        let mut rt = setup(Method::Shampoo, 1, 2, 50, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in 0..12 {
            let g = grad(4, 3, &mut rng);
            step(&mut rt, t, &g, 100);
        }
        let st = rt.stats();
        // Only the bootstrap job is waited for.
        assert_eq!(st.barrier_waits, 1);
        assert_eq!(st.dispatched, 6);
        assert_eq!(st.installed, 6);
        let f = rt.freshness(0).unwrap();
        assert_eq!(f.installed_snapshot_step, Some(10));
        // Dispatched mid-step 10, the job completes during step 11's compute.
        assert_eq!(f.last_install_step, Some(11));
    }

    #[test]
    fn consumed_age_stays_within_bound() {
        for (s, pf, cost) in [(0, 1, 350), (1, 3, 1000), (2, 2, 900), (3, 1, 10_000)] {
            let mut rt = setup(Method::Shampoo, s, pf, cost, false);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for t in 0..40 {
                let g = grad(4, 3, &mut rng);
                step(&mut rt, t, &g, 100);
                let snap = rt.block(0).unwrap().snapshot_step.unwrap();
                assert!(t - snap <= (s + 1) * pf, "s={s} pf={pf} t={t} snap={snap}");
            }
            rt.finish(40).unwrap();
            let st = rt.stats();
            assert_eq!(st.dispatched, st.installed);
        }
    }

    #[test]
    fn zero_staleness_matches_synchronous_refresh_schedule() {
        let pf = 3;
        let mut rt = setup(Method::Shampoo, 0, pf, 10_000, false);
        let opt = rt.config().optimizer.clone();
        let mut reference = PrecondBlock::new(0, partition_param(0, (4, 3), 2048).remove(0), Method::Shampoo);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in 0..20 {
            let g = grad(4, 3, &mut rng);
            let got = step(&mut rt, t, &g, 100);
            reference.accumulate_factors(&g, opt.accumulation_rule()).unwrap();
            if t == 0 {
                reference.refresh(&opt, t).unwrap();
            }
            let want = reference.precondition(&g, &opt).unwrap();
            if t % pf == 0 && t > 0 {
                reference.refresh(&opt, t).unwrap();
            }
            assert_eq!(got, want, "step {t}");
        }
    }

    #[test]
    fn coalesces_dispatch_while_pending() {
        let mut rt = setup(Method::Shampoo, 5, 1, 1_000, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 0..6 {
            let g = grad(4, 3, &mut rng);
            step(&mut rt, t, &g, 100);
        }
        let st = rt.stats();
        assert!(st.coalesced > 0);
        assert_eq!(st.dispatched + st.coalesced, 6);
    }

    #[test]
    fn offloaded_state_round_trips_through_cold() {
        let mut rt = setup(Method::Soap, 1, 2, 50, true);
        let mut plain = setup(Method::Soap, 1, 2, 50, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for t in 0..10 {
            let g = grad(4, 3, &mut rng);
            let a = step(&mut rt, t, &g, 100);
            let b = step(&mut plain, t, &g, 100);
            assert_eq!(a, b, "step {t}");
        }
        let key = TensorKey::new(0, TensorRole::BasisL);
        assert_eq!(rt.store().entry(&key).unwrap().tier, TierTag::Cold);
        assert!(rt.store().counters().io_writes > 0);
        rt.store().audit().unwrap();
    }

    #[test]
    fn replica_write_is_visible_to_next_consume() {
        let mut rt = setup(Method::Shampoo, 0, 1, 0, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = grad(4, 3, &mut rng);
        step(&mut rt, 0, &g, 100);
        let payload = rt.read_replica(0).unwrap();
        let doubled: Vec<f64> = payload.iter().map(|x| 2.0 * x).collect();
        rt.write_replica(0, &doubled).unwrap();
        assert_eq!(rt.read_replica(0).unwrap(), doubled);
    }

    #[test]
    fn hooks_record_trace_events() {
        let mut rt = setup(Method::Shampoo, 1, 1, 10, false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in 0..3 {
            let g = grad(4, 3, &mut rng);
            step(&mut rt, t, &g, 100);
        }
        let kinds: Vec<EventKind> = rt.trace().events().iter().map(|e| e.event).collect();
        for k in [
            EventKind::Dispatch,
            EventKind::Install,
            EventKind::Consume,
            EventKind::ForwardPost,
            EventKind::BackwardPre,
            EventKind::StepEnd,
        ] {
            assert!(kinds.contains(&k), "{k:?} missing");
        }
        let seqs: Vec<u64> = rt.trace().events().iter().map(|e| e.seq).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn unknown_block_is_rejected() {
        let mut rt = setup(Method::Shampoo, 1, 1, 10, false);
        assert_eq!(rt.maybe_dispatch(9, 0), Err(SchedError::UnknownBlock(9)));
    }
}
