#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadowprec::asyncsched::{EventKind, TraceEvent};
use shadowprec::densela::{gram_left, gram_right, inv_root, matmul, relative_damping, sym_eig, DenseMatrix, SymMatrix};
use shadowprec::harness::{RunConfig, Task};
use shadowprec::precond::{partition_param, Accumulation, BlockSpec, Method};

/// Random SPD matrix `B B^T / n + shift I` with entries of `B` uniform in
/// [-1, 1].
pub fn random_spd(n: usize, shift: f64, rng: &mut ChaCha8Rng) -> SymMatrix {
    let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum();
            m[i * n + j] = s / n as f64 + if i == j { shift } else { 0.0 };
        }
    }
    SymMatrix::from_full(n, m).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct RefBlock {
    param: usize,
    spec: BlockSpec,
    l: Vec<f64>,
    r: Vec<f64>,
    inv_l: Option<DenseMatrix>,
    inv_r: Option<DenseMatrix>,
    ql: Option<DenseMatrix>,
    qr: Option<DenseMatrix>,
    mom_m: DenseMatrix,
    mom_v: DenseMatrix,
    moment_steps: i32,
    pending: Option<(Vec<f64>, Vec<f64>)>,
}

fn square(q: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(q.rows(), q.cols(), |i, j| q.get(i, j) * q.get(i, j))
}

impl RefBlock {
    fn install(&mut self, l: &[f64], r: &[f64], cfg: &RunConfig) {
        let (m, n) = (self.spec.rows(), self.spec.cols());
        let l = SymMatrix::from_full(m, l.to_vec()).unwrap();
        let r = SymMatrix::from_full(n, r.to_vec()).unwrap();
        match cfg.optimizer.method {
            Method::Shampoo => {
                let d = cfg.optimizer.damping;
                self.inv_l = Some(inv_root(&l, 4, relative_damping(&l, d)).unwrap().to_dense());
                self.inv_r = Some(inv_root(&r, 4, relative_damping(&r, d)).unwrap().to_dense());
            }
            Method::Soap => {
                let ql = sym_eig(&l).unwrap().vectors;
                let qr = sym_eig(&r).unwrap().vectors;
                let old_l = self.ql.clone().unwrap_or_else(|| DenseMatrix::identity(m));
                let old_r = self.qr.clone().unwrap_or_else(|| DenseMatrix::identity(n));
                let pl = matmul(&ql.transpose(), &old_l).unwrap();
                let pr = matmul(&qr.transpose(), &old_r).unwrap();
                self.mom_m = matmul(&matmul(&pl, &self.mom_m).unwrap(), &pr.transpose()).unwrap();
                self.mom_v = matmul(&matmul(&square(&pl), &self.mom_v).unwrap(), &square(&pr).transpose()).unwrap();
                self.ql = Some(ql);
                self.qr = Some(qr);
            }
            Method::AdamW => unreachable!(),
        }
    }

    fn direction(&mut self, g: &DenseMatrix, cfg: &RunConfig) -> DenseMatrix {
        match cfg.optimizer.method {
            Method::Shampoo => {
                let left = matmul(self.inv_l.as_ref().unwrap(), g).unwrap();
                matmul(&left, self.inv_r.as_ref().unwrap()).unwrap()
            }
            Method::Soap => {
                let (ql, qr) = (self.ql.as_ref().unwrap(), self.qr.as_ref().unwrap());
                let mut x = matmul(&matmul(&ql.transpose(), g).unwrap(), qr).unwrap();
                self.moment_steps += 1;
                let o = &cfg.optimizer;
                let c1 = 1.0 - o.beta1.powi(self.moment_steps);
                let c2 = 1.0 - o.beta2.powi(self.moment_steps);
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        let gk = x.get(i, j);
                        let m = o.beta1 * self.mom_m.get(i, j) + (1.0 - o.beta1) * gk;
                        let v = o.beta2 * self.mom_v.get(i, j) + (1.0 - o.beta2) * gk * gk;
                        self.mom_m.set(i, j, m);
                        self.mom_v.set(i, j, v);
                        x.set(i, j, (m / c1) / ((v / c2).sqrt() + o.eps));
                    }
                }
                matmul(&matmul(ql, &x).unwrap(), &qr.transpose()).unwrap()
            }
            Method::AdamW => unreachable!(),
        }
    }
}

/// Single-threaded second-order training on one rank with the refresh
/// computed on the spot: factors snapshotted at a refresh step are used from
/// the next step on, except at step 0 where they are used immediately.
/// Returns the parameters after every step.
pub fn reference_trajectory(cfg: &RunConfig) -> Vec<Vec<DenseMatrix>> {
    assert!(matches!(cfg.optimizer.method, Method::Shampoo | Method::Soap));
    let task = Task::build(cfg).unwrap();
    let mut params = task.init_params(cfg);
    let mut blocks: Vec<RefBlock> = Vec::new();
    for (p, w) in params.iter().enumerate() {
        for spec in partition_param(p as u32, w.shape(), cfg.optimizer.block_dim_limit) {
            let (m, n) = (spec.rows(), spec.cols());
            blocks.push(RefBlock {
                param: p,
                spec,
                l: vec![0.0; m * m],
                r: vec![0.0; n * n],
                inv_l: None,
                inv_r: None,
                ql: None,
                qr: None,
                mom_m: DenseMatrix::zeros(m, n),
                mom_v: DenseMatrix::zeros(m, n),
                moment_steps: 0,
                pending: None,
            });
        }
    }
    let (a, b) = match cfg.optimizer.accumulation_rule() {
        Accumulation::Sum => (1.0, 1.0),
        Accumulation::Ema(beta) => (beta, 1.0 - beta),
    };
    let warm = (cfg.warmup_frac * cfg.steps as f64).ceil() as u64;
    let pf = cfg.optimizer.pf;
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for t in 0..cfg.steps {
        let mut grads = task.shard_grad(&params, t, cfg.batch_size, 0, 1).grads;
        let norm = grads.iter().map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            for g in &mut grads {
                g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
            }
        }
        let lr = cfg.optimizer.lr * if t < warm { (t + 1) as f64 / warm as f64 } else { 1.0 };
        let wd = cfg.optimizer.weight_decay;
        for blk in &mut blocks {
            let s = blk.spec.clone();
            let g = grads[blk.param].block(s.row_range.start, s.col_range.start, s.rows(), s.cols());
            let (gl, gr) = (gram_left(&g).to_full_vec(), gram_right(&g).to_full_vec());
            for (x, y) in blk.l.iter_mut().zip(&gl) {
                *x = a * *x + b * y;
            }
            for (x, y) in blk.r.iter_mut().zip(&gr) {
                *x = a * *x + b * y;
            }
            if let Some((l, r)) = blk.pending.take() {
                blk.install(&l, &r, cfg);
            }
            if t % pf == 0 {
                let (l, r) = (blk.l.clone(), blk.r.clone());
                if t == 0 {
                    blk.install(&l, &r, cfg);
                } else {
                    blk.pending = Some((l, r));
                }
            }
            let dir = blk.direction(&g, cfg);
            let w = &mut params[blk.param];
            for i in 0..s.rows() {
                for j in 0..s.cols() {
                    let (ri, cj) = (s.row_range.start + i, s.col_range.start + j);
                    let th = w.get(ri, cj);
                    w.set(ri, cj, th - lr * (dir.get(i, j) + wd * th));
                }
            }
        }
        history.push(params.clone());
    }
    history
}

pub fn max_abs_diff(a: &[DenseMatrix], b: &[DenseMatrix]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Inter-node bytes of a ring allreduce of `bytes` over ranks `0..world` in
/// rank order: reduce-scatter then all-gather, `2(W-1)` rounds in which each
/// rank forwards one `ceil(bytes/W)` chunk to its successor.
pub fn ring_allreduce_inter_bytes(node_of: &[usize], bytes: u64) -> u64 {
    let w = node_of.len() as u64;
    if w < 2 {
        return 0;
    }
    let chunk = bytes.div_ceil(w);
    let crossing = (0..node_of.len())
        .filter(|&i| node_of[i] != node_of[(i + 1) % node_of.len()])
        .count() as u64;
    2 * (w - 1) * chunk * crossing
}

/// Checks a merged trace against the staleness bound. Returns the number
/// of assertions made; panics with the offending event otherwise.
pub fn audit_staleness(trace: &[TraceEvent], s: u64, pf: u64) -> usize {
    let bound = (s + 1) * pf;
    let mut pending: HashMap<(usize, u32), u64> = HashMap::new();
    let mut checks = 0;
    for ev in trace {
        let Some(b) = ev.block_id else { continue };
        let key = (ev.worker, b);
        match ev.event {
            EventKind::Dispatch => {
                let open = pending.entry(key).or_insert(0);
                *open += 1;
                assert!(*open <= 1, "two pending jobs for block {b} at {ev:?}");
                checks += 1;
            }
            EventKind::Install => {
                let open = pending.get_mut(&key).expect("install without dispatch");
                assert_eq!(*open, 1, "install without a pending job at {ev:?}");
                *open -= 1;
                checks += 1;
            }
            EventKind::Consume => {
                let snap = ev.snapshot_step.expect("consume events carry the snapshot step");
                let age = ev.step - snap;
                assert!(age <= bound, "age {age} exceeds {bound} at {ev:?}");
                checks += 1;
            }
            _ => {}
        }
    }
    checks
}
