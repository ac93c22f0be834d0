use std::hash::Hasher;
use std::sync::Arc;
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::output::LossRow;
use super::task::Task;
use super::HarnessError;
use crate::asyncsched::{
    merge_traces, EventKind, HookEvent, HookKind, PoolStats, RuntimeConfig, ShadowRuntime, SyncAction, TraceEvent,
    WorkerPool,
};
use crate::clock::SimClock;
use crate::coherence::{coherence_tick, discover_topology, CoherenceRegistry};
use crate::densela::DenseMatrix;
use crate::metrics::{spike_stats, SpikeStats, StepTime};
use crate::precond::{adamw_step, apply_update, partition_param, AdamState, BlockSpec, PrecondBlock};
use crate::simnet::{NetError, SimNet};
use crate::tierstore::{StoreCounters, TierStore};

/// Aggregates persisted as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: Option<String>,
    pub method: String,
    pub staleness_s: u64,
    pub pf: u64,
    pub ranks: usize,
    pub nodes: usize,
    pub coherence_budget: Option<u64>,
    pub steps: u64,
    pub seed: u64,
    pub initial_eval_loss: f64,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub total_time_us: u64,
    pub compute_us: u64,
    pub collective_us: u64,
    pub barrier_wait_us: u64,
    pub install_us: u64,
    pub exposed_us: u64,
    /// Step-time statistics over steps after the first, which waits for the
    /// initial refresh in every mode.
    pub spike: Option<SpikeStats>,
    pub pool: PoolStats,
    pub tier: StoreCounters,
    pub intra_bytes: u64,
    pub inter_bytes: u64,
    pub coherence_intra_bytes: u64,
    pub coherence_inter_bytes: u64,
    pub coherence_syncs: u64,
    pub coherence_hits: u64,
    pub energy_joules: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub losses: Vec<LossRow>,
    /// Rank 0's step-time attribution.
    pub step_times: Vec<StepTime>,
    pub trace: Vec<TraceEvent>,
    pub final_params: Vec<DenseMatrix>,
    /// Rank 0's parameters after every step, when requested.
    pub param_history: Vec<Vec<DenseMatrix>>,
    /// `[rank][step]` digest of the parameters after the step.
    pub param_digests: Vec<Vec<u64>>,
    /// Per synced block and step on rank 0: (step, block, intra, inter).
    pub coherence_events: Vec<(u64, u32, u64, u64)>,
}

struct RankOutput {
    losses: Vec<LossRow>,
    step_times: Vec<StepTime>,
    trace: Vec<TraceEvent>,
    digests: Vec<u64>,
    history: Vec<Vec<DenseMatrix>>,
    params: Vec<DenseMatrix>,
    pool: PoolStats,
    tier: StoreCounters,
    coherence_events: Vec<(u64, u32, u64, u64)>,
    coherence_hits: u64,
    end_us: u64,
    aux_active_us: u64,
}

struct Shared<'a> {
    cfg: &'a RunConfig,
    task: &'a Task,
    net: &'a Arc<SimNet>,
    pool: &'a Arc<WorkerPool>,
    blocks: &'a [(usize, u32, BlockSpec)],
}

fn digest(params: &[DenseMatrix]) -> u64 {
    let mut h = FnvHasher::default();
    for p in params {
        for x in p.as_slice() {
            h.write_u64(x.to_bits());
        }
    }
    h.finish()
}

fn warmup_factor(cfg: &RunConfig, step: u64) -> f64 {
    let warm = (cfg.warmup_frac * cfg.steps as f64).ceil() as u64;
    if step < warm {
        (step + 1) as f64 / warm as f64
    } else {
        1.0
    }
}

fn rank_loop(sh: &Shared<'_>, rank: usize) -> Result<RankOutput, HarnessError> {
    let cfg = sh.cfg;
    let world = sh.net.topology().world_size();
    let clock = SimClock::virtual_at(0);
    let mut tier_cfg = cfg.tier.clone();
    if let Some(p) = &tier_cfg.cold_path {
        let mut name = p.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(format!(".rank{rank}"));
        tier_cfg.cold_path = Some(p.with_file_name(name));
    }
    let store = Arc::new(TierStore::new(tier_cfg, clock.clone())?);

    let second_order = cfg.is_second_order();
    let mut params = sh.task.init_params(cfg);
    let probe = sh.task.shard_grad(&params, 0, cfg.batch_size, rank, world);
    let total_weight: f64 = (0..world)
        .map(|r| sh.task.shard_grad(&params, 0, cfg.batch_size, r, world).weight)
        .sum();
    let compute_us = (cfg.step_compute_us as f64 * probe.weight / total_weight).round() as u64;
    let job_cost_us = (cfg.sched.inject_job_delay_steps * compute_us as f64).round() as u64;

    let blocks: Vec<(PrecondBlock, usize)> = if second_order {
        sh.blocks
            .iter()
            .map(|(p, id, spec)| (PrecondBlock::new(*id, spec.clone(), cfg.optimizer.method), *p))
            .collect()
    } else {
        Vec::new()
    };
    let mut rcfg = RuntimeConfig::new(rank, cfg.optimizer.clone(), cfg.sched.staleness_s);
    rcfg.virtual_workers = cfg.sched.pool_size.unwrap_or(blocks.len().max(1));
    rcfg.job_cost_us = job_cost_us;
    rcfg.real_job_delay = Duration::from_micros(cfg.sched.real_job_delay_us);
    rcfg.hook_drain_budget = cfg.sched.hook_drain_budget;
    rcfg.offload_inverse = cfg.sched.offload_inverse;
    let mut rt = ShadowRuntime::new(rcfg, blocks, Arc::clone(sh.pool), Arc::clone(&store), clock.clone())?;

    let coherent = second_order && world > 1 && cfg.coherence_budget.0.is_some();
    let mut registry = CoherenceRegistry::new();
    if coherent {
        for (_, id, _) in sh.blocks {
            registry.track(*id, 0);
        }
    }
    let mut adam: Vec<AdamState> = params.iter().map(|p| AdamState::new(p.as_slice().len())).collect();
    let world_group = sh.net.world_group();
    let modules = params.len();
    let mut out = RankOutput {
        losses: Vec::with_capacity(cfg.steps as usize),
        step_times: Vec::with_capacity(cfg.steps as usize),
        trace: Vec::new(),
        digests: Vec::with_capacity(cfg.steps as usize),
        history: Vec::new(),
        params: Vec::new(),
        pool: PoolStats::default(),
        tier: StoreCounters::default(),
        coherence_events: Vec::new(),
        coherence_hits: 0,
        end_us: 0,
        aux_active_us: 0,
    };

    for t in 0..cfg.steps {
        let t0 = clock.now_us();
        rt.begin_step(t);
        let sg = sh.task.shard_grad(&params, t, cfg.batch_size, rank, world);
        clock.advance(compute_us);
        for m in 0..modules {
            rt.on_hook(HookEvent::new(HookKind::ForwardPost, m, t))?;
        }
        for m in (0..modules).rev() {
            rt.on_hook(HookEvent::new(HookKind::BackwardPre, m, t))?;
        }

        let c0 = clock.now_us();
        let mut flat: Vec<f64> = sg.grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect();
        flat.push(sg.loss);
        let red = sh.net.allreduce_avg(&world_group, rank, &flat, sg.weight, clock.now_us())?;
        clock.advance_to(red.done_us);
        let mut collective_us = clock.now_us() - c0;
        let loss = *red.data.last().unwrap();
        let mut offset = 0;
        let mut grads: Vec<DenseMatrix> = sg
            .grads
            .iter()
            .map(|g| {
                let n = g.as_slice().len();
                let m = DenseMatrix::new(g.rows(), g.cols(), red.data[offset..offset + n].to_vec()).unwrap();
                offset += n;
                m
            })
            .collect();
        let norm = grads
            .iter()
            .map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            grads.iter_mut().for_each(|g| g.scale(s));
        }

        let lr = cfg.optimizer.lr * warmup_factor(cfg, t);
        let wd = cfg.optimizer.weight_decay;
        if second_order {
            // Dispatch every block before waiting on any so refreshes overlap.
            let block_grads: Vec<DenseMatrix> = sh
                .blocks
                .iter()
                .map(|(p, _, spec)| grads[*p].block(spec.row_range.start, spec.col_range.start, spec.rows(), spec.cols()))
                .collect();
            for ((_, id, _), gb) in sh.blocks.iter().zip(&block_grads) {
                rt.accumulate(*id, gb)?;
                rt.maybe_dispatch(*id, t)?;
            }
            for ((p, id, spec), gb) in sh.blocks.iter().zip(&block_grads) {
                let (r0, c0) = (spec.row_range.start, spec.col_range.start);
                rt.staleness_barrier(*id, t)?;
                let dir = rt.consume(*id, gb, t)?;
                let mut theta = params[*p].block(r0, c0, spec.rows(), spec.cols());
                apply_update(&mut theta, &dir, lr, wd)?;
                params[*p].set_block(r0, c0, &theta);
            }
        } else {
            for (k, g) in grads.iter().enumerate() {
                let dir = adamw_step(&mut adam[k], g, &cfg.optimizer)?;
                apply_update(&mut params[k], &dir, lr, wd)?;
            }
        }
        rt.on_hook(HookEvent::new(HookKind::StepEnd, 0, t))?;

        if coherent {
            let c1 = clock.now_us();
            let report = coherence_tick(
                sh.net,
                rank,
                &mut registry,
                &mut rt,
                t,
                cfg.coherence_budget,
                clock.now_us(),
            )?;
            clock.advance_to(report.done_us);
            collective_us += clock.now_us() - c1;
            let now = clock.now_us();
            for &(b, intra, inter) in &report.per_block {
                rt.trace_mut().emit(
                    TraceEvent::new(t, rank, EventKind::Coherence, now)
                        .block(b)
                        .sync(SyncAction::Sync, intra, inter),
                );
                out.coherence_events.push((t, b, intra, inter));
            }
            for &b in &report.hits {
                rt.trace_mut()
                    .emit(TraceEvent::new(t, rank, EventKind::Coherence, now).block(b).sync(SyncAction::Hit, 0, 0));
            }
            out.coherence_hits += report.hits.len() as u64;
        }

        if cfg!(debug_assertions) {
            store.audit().map_err(|e| HarnessError::Audit(e.to_string()))?;
        }
        let acct = rt.account();
        let now = clock.now_us();
        out.step_times.push(StepTime {
            step: t,
            total_us: now - t0,
            compute_us,
            collective_us,
            barrier_wait_us: acct.barrier_wait_us,
            install_us: acct.install_us + acct.page_in_us,
        });
        out.losses.push(LossRow {
            step: t,
            loss,
            simulated_time_us: now,
        });
        out.digests.push(digest(&params));
        if cfg.record_params && rank == 0 {
            out.history.push(params.clone());
        }
    }
    out.end_us = clock.now_us();
    rt.finish(cfg.steps)?;
    store.sync_cold()?;
    store.audit().map_err(|e| HarnessError::Audit(e.to_string()))?;
    out.pool = rt.stats();
    out.aux_active_us = out.pool.installed * job_cost_us;
    out.tier = store.counters();
    out.trace = rt.trace_mut().take();
    out.params = params;
    Ok(out)
}

/// Runs every rank to completion and aggregates the result.
pub fn run_training(cfg: &RunConfig) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let layout = cfg.topology.layout()?;
    let topo = discover_topology(&layout)?;
    let world = topo.world_size();
    let nodes = topo.num_nodes();
    let net = SimNet::new(topo, cfg.net.clone());
    let task = Task::build(cfg)?;

    let mut blocks = Vec::new();
    let mut next_id = 0u32;
    for (p, shape) in cfg.model.param_shapes().into_iter().enumerate() {
        for spec in partition_param(p as u32, shape, cfg.optimizer.block_dim_limit) {
            blocks.push((p, next_id, spec));
            next_id += 1;
        }
    }
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(blocks.len().max(1));
    let pool = WorkerPool::new(threads)?;
    let shared = Shared {
        cfg,
        task: &task,
        net: &net,
        pool: &pool,
        blocks: &blocks,
    };

    let results: Vec<Result<RankOutput, HarnessError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..world)
            .map(|rank| {
                let shared = &shared;
                let net = &net;
                std::thread::Builder::new()
                    .name(format!("rank-{rank}"))
                    .spawn_scoped(s, move || {
                        let r = rank_loop(shared, rank);
                        if r.is_err() {
                            net.fail_rank(rank);
                        }
                        r
                    })
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(HarnessError::Audit("rank thread panicked".into()))))
            .collect()
    });

    // Report the root cause rather than the peers' group failures.
    let mut outs = Vec::with_capacity(world);
    let mut first_err = None;
    for r in results {
        match r {
            Ok(o) => outs.push(o),
            Err(e) => {
                let secondary = matches!(e, HarnessError::Net(NetError::GroupFailure(_)))
                    || matches!(&e, HarnessError::Coherence(c) if c.is_group_failure());
                if first_err.is_none() || (!secondary && first_err.as_ref().map(|(s, _)| *s).unwrap_or(true)) {
                    first_err = Some((secondary, e));
                }
            }
        }
    }
    if let Some((_, e)) = first_err {
        return Err(e);
    }

    let ledger = net.ledger_snapshot();
    let r0 = &outs[0];
    for o in &outs[1..] {
        if o.digests != r0.digests {
            return Err(HarnessError::Audit("rank parameters diverged".into()));
        }
    }
    let initial_eval_loss = task.eval_loss(&task.init_params(cfg));
    let final_eval_loss = task.eval_loss(&r0.params);
    let sum = |f: fn(&StepTime) -> u64| r0.step_times.iter().map(f).sum::<u64>();
    let spike = if r0.step_times.len() > 1 {
        let totals: Vec<f64> = r0.step_times[1..].iter().map(|s| s.total_us as f64).collect();
        Some(spike_stats(&totals)?)
    } else {
        None
    };
    let energy_joules = outs
        .iter()
        .map(|o| {
            let active: u64 = o.step_times.iter().map(|s| s.compute_us).sum();
            cfg.energy.rank_joules(active, o.end_us) + cfg.energy.aux_joules(o.aux_active_us.min(o.end_us), o.end_us)
        })
        .sum();
    let coherence_intra_bytes = r0.coherence_events.iter().map(|e| e.2).sum();
    let coherence_inter_bytes = r0.coherence_events.iter().map(|e| e.3).sum();
    let summary = RunSummary {
        label: None,
        method: format!("{:?}", cfg.optimizer.method),
        staleness_s: cfg.sched.staleness_s,
        pf: cfg.optimizer.pf,
        ranks: world,
        nodes,
        coherence_budget: cfg.coherence_budget.0,
        steps: cfg.steps,
        seed: cfg.seed,
        initial_eval_loss,
        final_train_loss: r0.losses.last().map(|l| l.loss).unwrap_or(f64::NAN),
        final_eval_loss,
        total_time_us: r0.end_us,
        compute_us: sum(|s| s.compute_us),
        collective_us: sum(|s| s.collective_us),
        barrier_wait_us: sum(|s| s.barrier_wait_us),
        install_us: sum(|s| s.install_us),
        exposed_us: sum(|s| s.exposed_us()),
        spike,
        pool: r0.pool,
        tier: r0.tier,
        intra_bytes: ledger.intra_bytes,
        inter_bytes: ledger.inter_bytes,
        coherence_intra_bytes,
        coherence_inter_bytes,
        coherence_syncs: r0.coherence_events.len() as u64,
        coherence_hits: r0.coherence_hits,
        energy_joules,
    };
    let param_digests = outs.iter().map(|o| o.digests.clone()).collect();
    let mut outs = outs;
    let r0 = outs.swap_remove(0);
    let trace = merge_traces(std::iter::once(r0.trace).chain(outs.into_iter().map(|o| o.trace)).collect());
    Ok(RunResult {
        summary,
        losses: r0.losses,
        step_times: r0.step_times,
        trace,
        final_params: r0.params,
        param_history: r0.history,
        param_digests,
        coherence_events: r0.coherence_events,
    })
}
