mod common;

use std::sync::Arc;

use common::{audit_staleness, rng};
use rand::Rng;
use shadowprec::asyncsched::{EventKind, HookEvent, HookKind, RuntimeConfig, ShadowRuntime, WorkerPool};
use shadowprec::clock::SimClock;
use shadowprec::densela::DenseMatrix;
use shadowprec::precond::{partition_param, Method, OptimizerConfig, PrecondBlock};
use shadowprec::tierstore::{TierConfig, TierStore};

const STEP_US: u64 = 100;

fn runtime(method: Method, s: u64, pf: u64, job_cost_us: u64) -> ShadowRuntime {
    let opt = OptimizerConfig {
        method,
        pf,
        ..Default::default()
    };
    let mut cfg = RuntimeConfig::new(0, opt, s);
    cfg.job_cost_us = job_cost_us;
    let clock = SimClock::virtual_at(0);
    let store = Arc::new(TierStore::new(TierConfig::default(), clock.clone()).unwrap());
    let spec = partition_param(0, (5, 4), 2048).remove(0);
    let block = PrecondBlock::new(0, spec, method);
    ShadowRuntime::new(cfg, vec![(block, 0)], WorkerPool::new(1).unwrap(), store, clock).unwrap()
}

fn drive(rt: &mut ShadowRuntime, steps: u64, seed: u64) {
    let mut r = rng(seed);
    for t in 0..steps {
        let g = DenseMatrix::from_fn(5, 4, |_, _| r.gen_range(-1.0..1.0));
        rt.begin_step(t);
        rt.clock().advance(STEP_US);
        rt.on_hook(HookEvent::new(HookKind::ForwardPost, 0, t)).unwrap();
        rt.on_hook(HookEvent::new(HookKind::BackwardPre, 0, t)).unwrap();
        rt.accumulate(0, &g).unwrap();
        rt.maybe_dispatch(0, t).unwrap();
        rt.staleness_barrier(0, t).unwrap();
        rt.consume(0, &g, t).unwrap();
        rt.on_hook(HookEvent::new(HookKind::StepEnd, 0, t)).unwrap();
    }
    rt.finish(steps).unwrap();
}

fn consume_ages(rt: &ShadowRuntime) -> Vec<(u64, u64)> {
    rt.trace()
        .events()
        .iter()
        .filter(|e| e.event == EventKind::Consume)
        .map(|e| (e.step, e.step - e.snapshot_step.unwrap()))
        .collect()
}

#[test]
fn slow_worker_waits_only_at_the_bound() {
    for s in [0u64, 1, 2, 4] {
        let mut rt = runtime(Method::Shampoo, s, 1, (s + 3) * STEP_US);
        drive(&mut rt, 60, s);
        let ages = consume_ages(&rt);
        let bound = s + 1;
        assert!(ages.iter().all(|&(_, a)| a <= bound), "S={s}: {ages:?}");
        assert!(ages.iter().any(|&(_, a)| a == bound), "S={s}: bound never reached");
        // Every wait after the bootstrap is forced: either the awaited job is
        // more than S steps old or the held snapshot would exceed the bound.
        let waits: Vec<u64> = rt
            .trace()
            .events()
            .iter()
            .filter(|e| e.event == EventKind::BarrierWaitBegin && e.step > 0)
            .map(|e| e.step)
            .collect();
        assert!(!waits.is_empty(), "S={s}: slow jobs must force waits");
        for w in waits {
            // With pf = 1 the snapshot step is the dispatch step.
            let (_, job_age) = ages[w as usize];
            let held = ages[w as usize - 1].1 + 1;
            assert!(job_age > s || held > bound, "S={s}: wait at step {w}, job age {job_age}, held age {held}");
        }
        audit_staleness(rt.trace().events(), s, 1);
    }
}

#[test]
fn fast_worker_never_waits_after_bootstrap() {
    for method in [Method::Shampoo, Method::Soap] {
        let mut rt = runtime(method, 1, 4, STEP_US / 2);
        drive(&mut rt, 80, 7);
        let st = rt.stats();
        assert_eq!(st.barrier_waits, 1, "{method:?}");
        assert_eq!(st.dispatched, 20);
        assert!(consume_ages(&rt).iter().all(|&(_, a)| a <= 2 * 4));
    }
}

#[test]
fn larger_staleness_never_waits_longer() {
    let mut prev = u64::MAX;
    for s in [0u64, 1, 2, 3, 6] {
        let mut rt = runtime(Method::Soap, s, 2, 7 * STEP_US);
        drive(&mut rt, 100, 3);
        let w = rt.stats().wait_time_us;
        assert!(w <= prev, "S={s}: waited {w} us, previous {prev} us");
        prev = w;
    }
}
