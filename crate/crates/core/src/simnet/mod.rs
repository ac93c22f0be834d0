//! In-process collectives for simulated ranks.
//!
//! Every rank is a thread; a collective is a rendezvous of the group's
//! threads on a generation-counted slot. The last arriver computes the
//! result (in member order, so it is bit-identical regardless of arrival
//! order), charges the byte ledger once, and releases the others. Time is
//! modeled: each caller passes its arrival time and receives the completion
//! time `max(arrivals) + cost`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::{CostClass, TopologyGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("rendezvous timed out after {0} ms")]
    RendezvousTimeout(u64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("group member {0} is unreachable")]
    GroupFailure(usize),
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("rank {rank} is not a member of group {members:?}")]
    NotMember { rank: usize, members: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, NetError>;

/// How collective traffic is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ChargeModel {
    /// Root (minimum member) gathers, then scatters.
    #[default]
    Star,
    /// Reduce-scatter then all-gather around the member ring.
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub intra_latency_us: u64,
    pub inter_latency_us: u64,
    /// Bytes per second; zero means unlimited.
    pub intra_bw: u64,
    pub inter_bw: u64,
    /// Zero waits forever.
    pub rendezvous_timeout_ms: u64,
    pub model: ChargeModel,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            intra_latency_us: 5,
            inter_latency_us: 50,
            intra_bw: 100_000_000_000,
            inter_bw: 10_000_000_000,
            rendezvous_timeout_ms: 60_000,
            model: ChargeModel::Star,
        }
    }
}

impl NetConfig {
    fn edge_time_us(&self, class: CostClass, bytes: u64) -> u64 {
        let (lat, bw) = match class {
            CostClass::IntraNode => (self.intra_latency_us, self.intra_bw),
            CostClass::InterNode => (self.inter_latency_us, self.inter_bw),
        };
        let xfer = if bw == 0 {
            0
        } else {
            ((bytes as u128 * 1_000_000).div_ceil(bw as u128)) as u64
        };
        lat + xfer
    }
}

/// Sorted, distinct member ranks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Group {
    members: Vec<usize>,
}

impl Group {
    pub fn new(mut members: Vec<usize>) -> Result<Self> {
        if members.is_empty() {
            return Err(NetError::InvalidGroup("empty group".into()));
        }
        members.sort_unstable();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(NetError::InvalidGroup(format!("duplicate member in {members:?}")));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn root(&self) -> usize {
        self.members[0]
    }

    pub fn contains(&self, rank: usize) -> bool {
        self.members.binary_search(&rank).is_ok()
    }
}

/// Cumulative traffic and modeled time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub intra_bytes: u64,
    pub inter_bytes: u64,
    pub latency_us: u64,
    pub ops: u64,
}

impl CostLedger {
    pub fn bytes(&self, class: CostClass) -> u64 {
        match class {
            CostClass::IntraNode => self.intra_bytes,
            CostClass::InterNode => self.inter_bytes,
        }
    }

    fn add(&mut self, c: &OpCharge) {
        self.intra_bytes += c.intra_bytes;
        self.inter_bytes += c.inter_bytes;
        self.latency_us += c.time_us;
        self.ops += 1;
    }

    pub fn since(&self, earlier: &CostLedger) -> CostLedger {
        CostLedger {
            intra_bytes: self.intra_bytes - earlier.intra_bytes,
            inter_bytes: self.inter_bytes - earlier.inter_bytes,
            latency_us: self.latency_us - earlier.latency_us,
            ops: self.ops - earlier.ops,
        }
    }
}

/// What one collective cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCharge {
    pub intra_bytes: u64,
    pub inter_bytes: u64,
    pub time_us: u64,
}

impl OpCharge {
    fn add_edge(&mut self, class: CostClass, bytes: u64) {
        match class {
            CostClass::IntraNode => self.intra_bytes += bytes,
            CostClass::InterNode => self.inter_bytes += bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Collective {
    pub data: Arc<Vec<f64>>,
    pub done_us: u64,
    pub charge: OpCharge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    AllReduce,
    Broadcast(usize),
    Barrier,
    /// Elementwise max of small control metadata; not charged.
    Max,
}

struct Contribution {
    op: OpKind,
    data: Vec<f64>,
    weight: f64,
    arrival_us: u64,
}

type Outcome = Arc<Result<Collective>>;

#[derive(Default)]
struct Slot {
    generation: u64,
    arrivals: BTreeMap<usize, Contribution>,
    outcome: Option<(u64, Outcome)>,
    readers: usize,
}

pub struct SimNet {
    topo: TopologyGraph,
    cfg: NetConfig,
    slots: Mutex<HashMap<Vec<usize>, Slot>>,
    wake: Condvar,
    ledger: Mutex<CostLedger>,
    failed: Mutex<HashSet<usize>>,
}

impl std::fmt::Debug for SimNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimNet")
            .field("world", &self.topo.world_size())
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl SimNet {
    pub fn new(topo: TopologyGraph, cfg: NetConfig) -> Arc<Self> {
        Arc::new(Self {
            topo,
            cfg,
            slots: Mutex::new(HashMap::new()),
            wake: Condvar::new(),
            ledger: Mutex::new(CostLedger::default()),
            failed: Mutex::new(HashSet::new()),
        })
    }

    pub fn topology(&self) -> &TopologyGraph {
        &self.topo
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn world_group(&self) -> Group {
        Group::new(self.topo.all_ranks()).expect("topology has ranks")
    }

    pub fn ledger_snapshot(&self) -> CostLedger {
        *self.ledger.lock()
    }

    /// Marks a rank unreachable; pending and future collectives that
    /// include it fail with `GroupFailure`.
    pub fn fail_rank(&self, rank: usize) {
        self.failed.lock().insert(rank);
        let _guard = self.slots.lock();
        self.wake.notify_all();
    }

    /// Weighted mean of every member's `data`, returned to all members.
    pub fn allreduce_avg(
        &self,
        group: &Group,
        rank: usize,
        data: &[f64],
        weight: f64,
        arrival_us: u64,
    ) -> Result<Collective> {
        self.rendezvous(group, rank, OpKind::AllReduce, data.to_vec(), weight, arrival_us)
    }

    /// `root`'s data returned to all members; other members' data is ignored.
    pub fn broadcast(&self, group: &Group, rank: usize, root: usize, data: &[f64], arrival_us: u64) -> Result<Collective> {
        if !group.contains(root) {
            return Err(NetError::NotMember {
                rank: root,
                members: group.members().to_vec(),
            });
        }
        self.rendezvous(group, rank, OpKind::Broadcast(root), data.to_vec(), 1.0, arrival_us)
    }

    pub fn barrier(&self, group: &Group, rank: usize, arrival_us: u64) -> Result<u64> {
        Ok(self
            .rendezvous(group, rank, OpKind::Barrier, Vec::new(), 1.0, arrival_us)?
            .done_us)
    }

    /// Elementwise maximum of small metadata vectors (version counters).
    /// Completes at the latest arrival and is not charged; it stands for
    /// fields piggybacked on the payload messages.
    pub fn agree_max(&self, group: &Group, rank: usize, data: &[f64], arrival_us: u64) -> Result<Collective> {
        self.rendezvous(group, rank, OpKind::Max, data.to_vec(), 1.0, arrival_us)
    }

    fn check_failed(&self, group: &Group) -> Result<()> {
        let failed = self.failed.lock();
        match group.members().iter().find(|r| failed.contains(r)) {
            Some(&r) => Err(NetError::GroupFailure(r)),
            None => Ok(()),
        }
    }

    fn rendezvous(
        &self,
        group: &Group,
        rank: usize,
        op: OpKind,
        data: Vec<f64>,
        weight: f64,
        arrival_us: u64,
    ) -> Result<Collective> {
        if !group.contains(rank) {
            return Err(NetError::NotMember {
                rank,
                members: group.members().to_vec(),
            });
        }
        self.check_failed(group)?;
        if group.len() == 1 {
            let data = match op {
                OpKind::AllReduce | OpKind::Broadcast(_) | OpKind::Max => data,
                OpKind::Barrier => Vec::new(),
            };
            return Ok(Collective {
                data: Arc::new(data),
                done_us: arrival_us,
                charge: OpCharge::default(),
            });
        }
        let timeout = self.cfg.rendezvous_timeout_ms;
        let deadline = (timeout > 0).then(|| Instant::now() + Duration::from_millis(timeout));
        let key = group.members().to_vec();
        let mut slots = self.slots.lock();

        // Wait for readers of the previous generation to leave.
        loop {
            let slot = slots.entry(key.clone()).or_default();
            if slot.outcome.is_none() {
                break;
            }
            self.wait(&mut slots, deadline, timeout)?;
            self.check_failed(group)?;
        }
        let slot = slots.get_mut(&key).unwrap();
        let my_gen = slot.generation;
        slot.arrivals.insert(
            rank,
            Contribution {
                op,
                data,
                weight,
                arrival_us,
            },
        );
        if slot.arrivals.len() == group.len() {
            let arrivals = std::mem::take(&mut slot.arrivals);
            let outcome = Arc::new(self.complete(group, arrivals));
            slot.outcome = Some((my_gen, Arc::clone(&outcome)));
            slot.readers = group.len();
            slot.generation += 1;
            self.wake.notify_all();
        } else {
            loop {
                self.wait(&mut slots, deadline, timeout)?;
                if slots[&key].generation != my_gen {
                    break;
                }
                self.check_failed(group)?;
            }
        }
        let slot = slots.get_mut(&key).unwrap();
        let (gen, outcome) = slot.outcome.clone().expect("outcome present for readers");
        debug_assert_eq!(gen, my_gen);
        slot.readers -= 1;
        if slot.readers == 0 {
            slot.outcome = None;
            self.wake.notify_all();
        }
        drop(slots);
        (*outcome).clone()
    }

    fn wait(
        &self,
        slots: &mut parking_lot::MutexGuard<'_, HashMap<Vec<usize>, Slot>>,
        deadline: Option<Instant>,
        timeout: u64,
    ) -> Result<()> {
        match deadline {
            Some(d) => {
                if self.wake.wait_until(slots, d).timed_out() {
                    return Err(NetError::RendezvousTimeout(timeout));
                }
            }
            None => self.wake.wait(slots),
        }
        Ok(())
    }

    fn complete(&self, group: &Group, arrivals: BTreeMap<usize, Contribution>) -> Result<Collective> {
        let first = arrivals.values().next().unwrap();
        let op = first.op;
        let len = first.data.len();
        if let Some((r, c)) = arrivals.iter().find(|(_, c)| c.op != op) {
            return Err(NetError::ShapeMismatch(format!(
                "rank {r} issued {:?} while the group runs {op:?}",
                c.op
            )));
        }
        let start = arrivals.values().map(|c| c.arrival_us).max().unwrap();
        let data = match op {
            OpKind::AllReduce | OpKind::Max => {
                if let Some((r, c)) = arrivals.iter().find(|(_, c)| c.data.len() != len) {
                    return Err(NetError::ShapeMismatch(format!(
                        "rank {r} sent {} values, expected {len}",
                        c.data.len()
                    )));
                }
                if op == OpKind::Max {
                    let mut out = vec![f64::NEG_INFINITY; len];
                    for c in arrivals.values() {
                        for (o, x) in out.iter_mut().zip(&c.data) {
                            *o = o.max(*x);
                        }
                    }
                    out
                } else {
                    let total: f64 = arrivals.values().map(|c| c.weight).sum();
                    if !(total > 0.0) {
                        return Err(NetError::ShapeMismatch("weights must sum to a positive value".into()));
                    }
                    let mut acc = vec![0.0; len];
                    for c in arrivals.values() {
                        for (a, x) in acc.iter_mut().zip(&c.data) {
                            *a += c.weight * x;
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= total);
                    acc
                }
            }
            OpKind::Broadcast(root) => arrivals[&root].data.clone(),
            OpKind::Barrier => Vec::new(),
        };
        let bytes = 8 * data.len() as u64;
        let charge = match op {
            OpKind::Max => OpCharge::default(),
            _ => self.charge(group, op, bytes),
        };
        self.ledger.lock().add(&charge);
        Ok(Collective {
            data: Arc::new(data),
            done_us: start + charge.time_us,
            charge,
        })
    }

    /// Closed-form charge of one collective under the configured model.
    pub fn charge_for(&self, group: &Group, allreduce: bool, bytes: u64) -> OpCharge {
        let op = if allreduce {
            OpKind::AllReduce
        } else {
            OpKind::Broadcast(group.root())
        };
        self.charge(group, op, bytes)
    }

    fn charge(&self, group: &Group, op: OpKind, bytes: u64) -> OpCharge {
        let mut c = OpCharge::default();
        let n = group.len() as u64;
        if n < 2 {
            return c;
        }
        let members = group.members();
        match (op, self.cfg.model) {
            (OpKind::Barrier, _) => {
                let worst = members[1..]
                    .iter()
                    .map(|&r| self.cfg.edge_time_us(self.topo.edge_cost(members[0], r), 0))
                    .max()
                    .unwrap();
                c.time_us = 2 * worst;
            }
            (OpKind::AllReduce, ChargeModel::Ring) => {
                let per_edge = 2 * (n - 1) * bytes / n;
                let chunk = bytes.div_ceil(n);
                let mut worst = 0;
                for i in 0..members.len() {
                    let (a, b) = (members[i], members[(i + 1) % members.len()]);
                    let class = self.topo.edge_cost(a, b);
                    c.add_edge(class, per_edge);
                    worst = worst.max(self.cfg.edge_time_us(class, chunk));
                }
                c.time_us = 2 * (n - 1) * worst;
            }
            (OpKind::AllReduce, ChargeModel::Star) | (OpKind::Broadcast(_), _) => {
                let (root, phases) = match op {
                    OpKind::Broadcast(root) => (root, 1),
                    _ => (group.root(), 2),
                };
                let mut worst = 0;
                for &r in members.iter().filter(|&&r| r != root) {
                    let class = self.topo.edge_cost(root, r);
                    c.add_edge(class, phases * bytes);
                    worst = worst.max(self.cfg.edge_time_us(class, bytes));
                }
                c.time_us = phases * worst;
            }
            (OpKind::Max, _) => {}
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coherence::{discover_topology, NodeLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::thread;

    fn net(nodes: usize, k: usize, model: ChargeModel) -> Arc<SimNet> {
        let topo = discover_topology(&NodeLayout::uniform(nodes, k)).unwrap();
        SimNet::new(
            topo,
            NetConfig {
                model,
                rendezvous_timeout_ms: 5_000,
                ..NetConfig::default()
            },
        )
    }

    fn run_all<T: Send + 'static>(n: usize, f: impl Fn(usize) -> T + Send + Sync + 'static) -> Vec<T> {
        let f = Arc::new(f);
        let handles: Vec<_> = (0..n)
            .map(|r| {
                let f = Arc::clone(&f);
                thread::spawn(move || f(r))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    }

    #[test]
    fn singleton_is_identity() {
        let n = net(1, 1, ChargeModel::Star);
        let g = Group::new(vec![0]).unwrap();
        let out = n.allreduce_avg(&g, 0, &[1.5, 2.5], 1.0, 7).unwrap();
        assert_eq!(*out.data, vec![1.5, 2.5]);
        assert_eq!(out.done_us, 7);
        assert_eq!(n.ledger_snapshot(), CostLedger::default());
    }

    #[test]
    fn pair_average() {
        let n = net(1, 2, ChargeModel::Star);
        let nn = Arc::clone(&n);
        let outs = run_all(2, move |r| {
            let g = Group::new(vec![0, 1]).unwrap();
            nn.allreduce_avg(&g, r, &[10.0 * r as f64], 1.0, 0).unwrap()
        });
        for o in &outs {
            assert_eq!(*o.data, vec![5.0]);
        }
        let l = n.ledger_snapshot();
        assert_eq!(l.intra_bytes, 2 * 8);
        assert_eq!(l.inter_bytes, 0);
        assert_eq!(l.ops, 1);
    }

    #[test]
    fn four_rank_mean_and_charges() {
        let n = net(2, 2, ChargeModel::Star);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vecs: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let shared = Arc::new(vecs.clone());
        let nn = Arc::clone(&n);
        let outs = run_all(4, move |r| {
            let g = nn.world_group();
            nn.allreduce_avg(&g, r, &shared[r], 1.0, 10 * r as u64).unwrap()
        });
        for k in 0..5 {
            let mean = vecs.iter().map(|v| v[k]).sum::<f64>() / 4.0;
            for o in &outs {
                assert!((o.data[k] - mean).abs() < 1e-12);
            }
        }
        assert!(outs.iter().all(|o| o.data == outs[0].data));
        // Root 0: one intra edge (to 1) and two inter edges (to 2, 3), two phases of 40 bytes.
        let l = n.ledger_snapshot();
        assert_eq!(l.intra_bytes, 2 * 40);
        assert_eq!(l.inter_bytes, 2 * 2 * 40);
        let cfg = n.config();
        let inter = cfg.inter_latency_us + (40u64 * 1_000_000).div_ceil(cfg.inter_bw);
        assert_eq!(outs[0].done_us, 30 + 2 * inter);
    }

    #[test]
    fn broadcast_copies_root() {
        let n = net(1, 3, ChargeModel::Star);
        let nn = Arc::clone(&n);
        let outs = run_all(3, move |r| {
            let g = nn.world_group();
            nn.broadcast(&g, r, 1, &[r as f64, 0.5], 0).unwrap()
        });
        assert!(outs.iter().all(|o| *o.data == vec![1.0, 0.5]));
        assert_eq!(n.ledger_snapshot().intra_bytes, 2 * 16);
    }

    #[test]
    fn ring_charges_closed_form() {
        let n = net(2, 2, ChargeModel::Ring);
        let nn = Arc::clone(&n);
        run_all(4, move |r| {
            let g = nn.world_group();
            nn.allreduce_avg(&g, r, &[1.0; 8], 1.0, 0).unwrap()
        });
        // Ring 0-1-2-3-0: edges (0,1) and (2,3) intra, (1,2) and (3,0) inter.
        let per_edge = 2 * 3 * 64 / 4;
        let l = n.ledger_snapshot();
        assert_eq!(l.intra_bytes, 2 * per_edge);
        assert_eq!(l.inter_bytes, 2 * per_edge);
    }

    #[test]
    fn repeated_collectives_and_conservation() {
        let n = net(2, 2, ChargeModel::Star);
        let nn = Arc::clone(&n);
        let charges = run_all(4, move |r| {
            let world = nn.world_group();
            let node = Group::new(nn.topology().node_members(nn.topology().node_of(r)).to_vec()).unwrap();
            let mut sum = OpCharge::default();
            for i in 0..50 {
                let a = nn.allreduce_avg(&world, r, &[i as f64; 3], 1.0, 0).unwrap();
                let b = nn.allreduce_avg(&node, r, &[r as f64], 1.0, 0).unwrap();
                if r == 0 {
                    for c in [a.charge, b.charge] {
                        sum.intra_bytes += c.intra_bytes;
                        sum.inter_bytes += c.inter_bytes;
                    }
                }
                if r == 2 {
                    sum.intra_bytes += b.charge.intra_bytes;
                }
            }
            sum
        });
        let l = n.ledger_snapshot();
        assert_eq!(l.ops, 50 * 3);
        assert_eq!(l.intra_bytes, charges[0].intra_bytes + charges[2].intra_bytes);
        assert_eq!(l.inter_bytes, charges[0].inter_bytes);
    }

    #[test]
    fn shape_mismatch_reaches_everyone() {
        let n = net(1, 2, ChargeModel::Star);
        let outs = run_all(2, move |r| {
            let g = n.world_group();
            n.allreduce_avg(&g, r, &vec![0.0; r + 1], 1.0, 0)
        });
        assert!(outs.iter().all(|o| matches!(o, Err(NetError::ShapeMismatch(_)))));
    }

    #[test]
    fn timeout_when_peer_absent() {
        let topo = discover_topology(&NodeLayout::uniform(1, 2)).unwrap();
        let n = SimNet::new(
            topo,
            NetConfig {
                rendezvous_timeout_ms: 50,
                ..NetConfig::default()
            },
        );
        let g = n.world_group();
        assert_eq!(n.barrier(&g, 0, 0), Err(NetError::RendezvousTimeout(50)));
    }

    #[test]
    fn failed_rank_surfaces() {
        let n = net(1, 2, ChargeModel::Star);
        n.fail_rank(1);
        let g = n.world_group();
        assert_eq!(
            n.allreduce_avg(&g, 0, &[1.0], 1.0, 0),
            Err(NetError::GroupFailure(1))
        );
    }

    #[test]
    fn max_is_free() {
        let n = net(1, 3, ChargeModel::Star);
        let nn = Arc::clone(&n);
        let outs = run_all(3, move |r| {
            let g = nn.world_group();
            nn.agree_max(&g, r, &[r as f64, -(r as f64)], 0).unwrap()
        });
        assert!(outs.iter().all(|o| *o.data == vec![2.0, 0.0]));
        assert_eq!(n.ledger_snapshot().intra_bytes, 0);
    }
}
