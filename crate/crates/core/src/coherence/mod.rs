//! Bounded-staleness coherence for replicated Host-resident preconditioner
//! blocks.
//!
//! Each rank keeps a registry of `(version, last_sync_step)` per block. At a
//! tick, blocks whose last sync is at least `B` steps old are synchronized
//! hierarchically (node-local average, size-weighted average across node
//! representatives, broadcast back within each node); the rest count as
//! cache hits and move no bytes.

mod topology;

pub use topology::{discover_topology, CostClass, NodeLayout, TopologyGraph};

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::{Group, NetError, OpCharge, SimNet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoherenceError {
    #[error("invalid node layout: {0}")]
    InvalidLayout(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("block {0} is not tracked")]
    UnknownBlock(u32),
    #[error("replica access failed for block {block}: {reason}")]
    Replica { block: u32, reason: String },
}

impl CoherenceError {
    pub fn is_group_failure(&self) -> bool {
        matches!(self, CoherenceError::Net(NetError::GroupFailure(_)))
    }
}

pub type Result<T> = std::result::Result<T, CoherenceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherenceRecord {
    pub block_id: u32,
    pub version: u64,
    pub last_sync_step: u64,
}

/// Maximum steps between syncs of a block; `None` never syncs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CoherenceBudget(pub Option<u64>);

impl CoherenceBudget {
    pub const NEVER: CoherenceBudget = CoherenceBudget(None);

    pub fn every(b: u64) -> Self {
        assert!(b >= 1, "coherence budget must be at least 1");
        CoherenceBudget(Some(b))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CoherenceRegistry {
    records: BTreeMap<u32, CoherenceRecord>,
}

impl CoherenceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts tracking a block as synchronized at `step`.
    pub fn track(&mut self, block_id: u32, step: u64) {
        self.records.entry(block_id).or_insert(CoherenceRecord {
            block_id,
            version: 0,
            last_sync_step: step,
        });
    }

    pub fn record(&self, block_id: u32) -> Option<&CoherenceRecord> {
        self.records.get(&block_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn block_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.records.keys().copied()
    }

    fn mark_synced(&mut self, block_id: u32, step: u64, version: u64) -> Result<()> {
        let r = self
            .records
            .get_mut(&block_id)
            .ok_or(CoherenceError::UnknownBlock(block_id))?;
        r.last_sync_step = step;
        r.version = r.version.max(version);
        Ok(())
    }
}

/// Blocks due for synchronization: those with `step - last_sync_step >= B`,
/// in ascending block order. Everything else is a cache hit.
pub fn select_stale(registry: &CoherenceRegistry, step: u64, budget: CoherenceBudget) -> Vec<u32> {
    let Some(b) = budget.0 else {
        return Vec::new();
    };
    registry
        .records
        .values()
        .filter(|r| step.saturating_sub(r.last_sync_step) >= b)
        .map(|r| r.block_id)
        .collect()
}

/// Result of one hierarchical synchronization as seen by one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncOutcome {
    pub value: Arc<Vec<f64>>,
    pub done_us: u64,
    /// Bytes moved by the whole sync across all groups.
    pub charge: OpCharge,
}

/// Node-local average, representative average weighted by node size, then
/// broadcast from each representative to its node. Every rank of the
/// topology must call this with its replica.
pub fn hierarchical_sync(net: &SimNet, rank: usize, replica: &[f64], arrival_us: u64) -> Result<SyncOutcome> {
    let topo = net.topology();
    let node = topo.node_of(rank);
    let members = topo.node_members(node).to_vec();
    let node_group = Group::new(members.clone())?;
    let rep = topo.representative_of(rank);
    let reps = Group::new(topo.representatives().to_vec())?;

    let local = net.allreduce_avg(&node_group, rank, replica, 1.0, arrival_us)?;
    let (mut value, mut t) = (local.data, local.done_us);
    if rep == rank {
        let global = net.allreduce_avg(&reps, rank, &value, members.len() as f64, t)?;
        value = global.data;
        t = global.done_us;
    }
    let out = net.broadcast(&node_group, rank, rep, &value, t)?;

    let bytes = 8 * replica.len() as u64;
    let mut charge = OpCharge::default();
    let mut add = |c: OpCharge| {
        charge.intra_bytes += c.intra_bytes;
        charge.inter_bytes += c.inter_bytes;
    };
    for k in 0..topo.num_nodes() {
        let g = Group::new(topo.node_members(k).to_vec())?;
        add(net.charge_for(&g, true, bytes));
        add(net.charge_for(&g, false, bytes));
    }
    add(net.charge_for(&reps, true, bytes));
    charge.time_us = out.done_us - arrival_us;
    Ok(SyncOutcome {
        value: out.data,
        done_us: out.done_us,
        charge,
    })
}

/// Access to a rank's replicas of the tracked blocks.
pub trait Replicas {
    fn read_replica(&mut self, block_id: u32) -> std::result::Result<Vec<f64>, String>;
    fn write_replica(&mut self, block_id: u32, value: &[f64]) -> std::result::Result<(), String>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SyncReport {
    pub step: u64,
    pub synced: Vec<u32>,
    pub hits: Vec<u32>,
    /// Per synced block: (block, intra bytes, inter bytes).
    pub per_block: Vec<(u32, u64, u64)>,
    pub intra_bytes: u64,
    pub inter_bytes: u64,
    pub done_us: u64,
}

/// Selects stale blocks and synchronizes each of them. All ranks must call
/// this at the same step with registries that agree on `last_sync_step`.
pub fn coherence_tick(
    net: &SimNet,
    rank: usize,
    registry: &mut CoherenceRegistry,
    replicas: &mut dyn Replicas,
    step: u64,
    budget: CoherenceBudget,
    arrival_us: u64,
) -> Result<SyncReport> {
    let stale = select_stale(registry, step, budget);
    let mut report = SyncReport {
        step,
        hits: registry
            .block_ids()
            .filter(|b| !stale.contains(b))
            .collect(),
        done_us: arrival_us,
        ..SyncReport::default()
    };
    let world = net.world_group();
    for &block in &stale {
        let replica = replicas
            .read_replica(block)
            .map_err(|reason| CoherenceError::Replica { block, reason })?;
        let out = hierarchical_sync(net, rank, &replica, report.done_us)?;
        replicas
            .write_replica(block, &out.value)
            .map_err(|reason| CoherenceError::Replica { block, reason })?;
        let local = registry.record(block).map(|r| r.version).unwrap_or(0);
        let agreed = net.agree_max(&world, rank, &[local as f64], out.done_us)?;
        registry.mark_synced(block, step, agreed.data[0] as u64 + 1)?;
        report.synced.push(block);
        report.per_block.push((block, out.charge.intra_bytes, out.charge.inter_bytes));
        report.intra_bytes += out.charge.intra_bytes;
        report.inter_bytes += out.charge.inter_bytes;
        report.done_us = agreed.done_us;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::NetConfig;
    use std::thread;

    fn run_ranks<T: Send + 'static>(
        layout: NodeLayout,
        f: impl Fn(&SimNet, usize) -> T + Send + Sync + 'static,
    ) -> (Vec<T>, Arc<SimNet>) {
        let net = SimNet::new(discover_topology(&layout).unwrap(), NetConfig::default());
        let f = Arc::new(f);
        let handles: Vec<_> = (0..layout.world_size())
            .map(|r| {
                let (f, net) = (Arc::clone(&f), Arc::clone(&net));
                thread::spawn(move || f(&net, r))
            })
            .collect();
        (handles.into_iter().map(|h| h.join().unwrap()).collect(), net)
    }

    #[test]
    fn infinite_budget_selects_nothing() {
        let mut reg = CoherenceRegistry::new();
        reg.track(0, 0);
        for step in 0..100 {
            assert!(select_stale(&reg, step, CoherenceBudget::NEVER).is_empty());
        }
    }

    #[test]
    fn selection_matches_filter() {
        let mut reg = CoherenceRegistry::new();
        for (b, last) in [(0, 0), (1, 3), (2, 7), (3, 9)] {
            reg.track(b, last);
        }
        let got = select_stale(&reg, 10, CoherenceBudget::every(3));
        let want: Vec<u32> = [(0u32, 0u64), (1, 3), (2, 7), (3, 9)]
            .iter()
            .filter(|(_, l)| 10 - l >= 3)
            .map(|(b, _)| *b)
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn two_by_two_global_mean() {
        let (outs, net) = run_ranks(NodeLayout::uniform(2, 2), |net, r| {
            hierarchical_sync(net, r, &[(r + 1) as f64], 0).unwrap()
        });
        for o in &outs {
            assert_eq!(*o.value, vec![2.5]);
        }
        assert!(outs[0].charge.inter_bytes > 0);
        let l = net.ledger_snapshot();
        assert_eq!(l.intra_bytes, outs[0].charge.intra_bytes);
        assert_eq!(l.inter_bytes, outs[0].charge.inter_bytes);
    }

    #[test]
    fn single_node_has_no_inter_traffic() {
        let (outs, _) = run_ranks(NodeLayout::uniform(1, 3), |net, r| {
            hierarchical_sync(net, r, &[r as f64, 1.0], 0).unwrap()
        });
        for o in &outs {
            assert_eq!(*o.value, vec![1.0, 1.0]);
            assert_eq!(o.charge.inter_bytes, 0);
        }
    }

    #[test]
    fn unequal_nodes_weight_by_size() {
        let vals = [1.0, 1.0, 1.0, 5.0];
        let (outs, _) = run_ranks(NodeLayout::from_sizes(&[3, 1]), move |net, r| {
            hierarchical_sync(net, r, &[vals[r]], 0).unwrap()
        });
        for o in &outs {
            assert!((o.value[0] - 2.0).abs() < 1e-12);
        }
    }

    struct Vals(BTreeMap<u32, Vec<f64>>);

    impl Replicas for Vals {
        fn read_replica(&mut self, b: u32) -> std::result::Result<Vec<f64>, String> {
            self.0.get(&b).cloned().ok_or_else(|| "missing".into())
        }
        fn write_replica(&mut self, b: u32, v: &[f64]) -> std::result::Result<(), String> {
            self.0.insert(b, v.to_vec());
            Ok(())
        }
    }

    #[test]
    fn tick_counts_and_conservation() {
        let (outs, _) = run_ranks(NodeLayout::uniform(2, 2), |net, r| {
            let mut reg = CoherenceRegistry::new();
            let mut vals = Vals((0..3).map(|b| (b, vec![r as f64; 4])).collect());
            for b in 0..3 {
                reg.track(b, 0);
            }
            let mut synced = 0;
            let mut t = 0;
            for step in 1..=40 {
                let rep = coherence_tick(net, r, &mut reg, &mut vals, step, CoherenceBudget::every(4), t).unwrap();
                assert_eq!(rep.hits.len() + rep.synced.len(), 3);
                synced += rep.synced.len();
                t = rep.done_us;
            }
            (synced, reg.record(0).unwrap().version, vals.0[&2].clone())
        });
        for (synced, version, v) in &outs {
            assert_eq!(*synced, 3 * 10);
            assert_eq!(*version, 10);
            assert_eq!(v, &outs[0].2);
        }
        assert_eq!(outs[0].2, vec![1.5; 4]);
    }
}
