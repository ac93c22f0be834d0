use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{Activation, ModelSpec, RunConfig, TaskConfig};
use super::HarnessError;
use crate::densela::{matmul, sym_eig, DenseMatrix, SymMatrix};

/// Contiguous share of `total` items owned by `rank`; the first
/// `total % world` ranks take one extra item.
pub fn shard_range(total: usize, rank: usize, world: usize) -> Range<usize> {
    let base = total / world;
    let extra = total % world;
    let start = rank * base + rank.min(extra);
    start..start + base + usize::from(rank < extra)
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Random `k x k` orthogonal matrix from the eigenvectors of a random
/// symmetric matrix.
fn orthogonal(k: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let g = gaussian(k, k, 1.0, rng);
    let mut s = g.clone();
    s.axpy(1.0, &g.transpose()).expect("square");
    let sym = SymMatrix::from_dense(&s).expect("symmetrized");
    sym_eig(&sym).expect("eigendecomposition of a random symmetric matrix").vectors
}

/// Fan-in scaled Gaussian weights for every layer of `spec`.
pub fn init_weights(spec: &ModelSpec, seed: u64, gain: f64) -> Vec<DenseMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.param_shapes()
        .into_iter()
        .map(|(o, i)| gaussian(o, i, gain / (i as f64).sqrt(), &mut rng))
        .collect()
}

fn activate(act: Activation, z: &DenseMatrix) -> DenseMatrix {
    match act {
        Activation::Identity => z.clone(),
        Activation::Tanh => {
            let mut h = z.clone();
            h.as_mut_slice().iter_mut().for_each(|x| *x = x.tanh());
            h
        }
    }
}

/// Output logits for a batch whose rows are samples.
pub fn mlp_logits(params: &[DenseMatrix], act: Activation, x: &DenseMatrix) -> DenseMatrix {
    let mut h = x.clone();
    for (k, w) in params.iter().enumerate() {
        let z = matmul(&h, &w.transpose()).expect("layer shapes chain");
        h = if k + 1 < params.len() { activate(act, &z) } else { z };
    }
    h
}

/// Mean softmax cross-entropy over the batch and its gradient with
/// respect to every weight matrix.
pub fn mlp_loss_grad(
    params: &[DenseMatrix],
    act: Activation,
    x: &DenseMatrix,
    y: &[usize],
) -> (f64, Vec<DenseMatrix>) {
    let b = x.rows();
    let mut hs = vec![x.clone()];
    for (k, w) in params.iter().enumerate() {
        let z = matmul(hs.last().unwrap(), &w.transpose()).expect("layer shapes chain");
        hs.push(if k + 1 < params.len() { activate(act, &z) } else { z });
    }
    let logits = hs.pop().unwrap();
    let classes = logits.cols();
    let mut dz = DenseMatrix::zeros(b, classes);
    let mut loss = 0.0;
    for i in 0..b {
        let row = &logits.as_slice()[i * classes..(i + 1) * classes];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - mx).exp()).sum();
        let lse = mx + sum.ln();
        loss += lse - row[y[i]];
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            let t = if c == y[i] { 1.0 } else { 0.0 };
            dz.set(i, c, (p - t) / b as f64);
        }
    }
    loss /= b as f64;
    let mut grads = vec![DenseMatrix::zeros(0, 0); params.len()];
    for k in (0..params.len()).rev() {
        let h = &hs[k];
        grads[k] = matmul(&dz.transpose(), h).expect("gradient shape");
        if k > 0 {
            let mut dh = matmul(&dz, &params[k]).expect("backprop shape");
            if act == Activation::Tanh {
                for (d, hv) in dh.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    *d *= 1.0 - hv * hv;
                }
            }
            dz = dh;
        }
    }
    (loss, grads)
}

#[derive(Debug, Clone)]
pub struct QuadraticTask {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub c: DenseMatrix,
    pub w_star: DenseMatrix,
    pub scale: f64,
}

impl QuadraticTask {
    /// `A` and `B` each have condition number `kappa^(1/4)`, so the
    /// Hessian `scale * (A^T A) ⊗ (B B^T)` has condition number `kappa`.
    /// `W*` has unit Frobenius norm and the loss at `W = 0` is one.
    pub fn generate(m: usize, n: usize, rows: usize, out_cols: usize, kappa: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spectrum = |k: usize| -> Vec<f64> {
            (0..k)
                .map(|i| {
                    let frac = if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 };
                    kappa.powf(-0.25 * frac)
                })
                .collect()
        };
        let ua = orthogonal(rows, &mut rng).block(0, 0, rows, m);
        let va = orthogonal(m, &mut rng);
        let a = matmul(&matmul(&ua, &DenseMatrix::from_diag(&spectrum(m))).unwrap(), &va.transpose()).unwrap();
        let vb = orthogonal(n, &mut rng);
        let ub = orthogonal(out_cols, &mut rng).block(0, 0, out_cols, n);
        let b = matmul(&matmul(&vb, &DenseMatrix::from_diag(&spectrum(n))).unwrap(), &ub.transpose()).unwrap();
        let mut w_star = gaussian(m, n, 1.0, &mut rng);
        let norm = w_star.frobenius();
        w_star.scale(1.0 / norm);
        let c = matmul(&matmul(&a, &w_star).unwrap(), &b).unwrap();
        let scale = 2.0 / (c.frobenius() * c.frobenius());
        Self {
            a,
            b,
            c,
            w_star,
            scale,
        }
    }

    fn residual(&self, w: &DenseMatrix, rows: Range<usize>) -> (DenseMatrix, DenseMatrix) {
        let ar = self.a.block(rows.start, 0, rows.len(), self.a.cols());
        let cr = self.c.block(rows.start, 0, rows.len(), self.c.cols());
        let mut r = matmul(&matmul(&ar, w).unwrap(), &self.b).unwrap();
        r.axpy(-1.0, &cr).unwrap();
        (ar, r)
    }

    /// Mean per-row loss over `rows` and its gradient. Per-row losses are
    /// scaled so that their mean over all rows is the full objective.
    pub fn shard_loss_grad(&self, w: &DenseMatrix, rows: Range<usize>) -> (f64, DenseMatrix) {
        let k = rows.len() as f64;
        let p = self.a.rows() as f64;
        let (ar, r) = self.residual(w, rows);
        let f = self.scale * p / k;
        let loss = 0.5 * f * r.frobenius().powi(2);
        let mut g = matmul(&matmul(&ar.transpose(), &r).unwrap(), &self.b.transpose()).unwrap();
        g.scale(f);
        (loss, g)
    }

    pub fn loss(&self, w: &DenseMatrix) -> f64 {
        let (_, r) = self.residual(w, 0..self.a.rows());
        0.5 * self.scale * r.frobenius().powi(2)
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierTask {
    pub activation: Activation,
    pub teacher: Vec<DenseMatrix>,
    pub eval_x: DenseMatrix,
    pub eval_y: Vec<usize>,
    seed: u64,
    input_dim: usize,
}

impl ClassifierTask {
    pub fn generate(model: &ModelSpec, teacher_seed: u64, teacher_scale: f64, eval_size: usize, seed: u64) -> Self {
        let teacher = init_weights(model, teacher_seed, teacher_scale);
        let mut t = Self {
            activation: model.activation,
            teacher,
            eval_x: DenseMatrix::zeros(0, 0),
            eval_y: Vec::new(),
            seed,
            input_dim: model.dims[0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(teacher_seed ^ 0xe7a1);
        let (x, y) = t.sample(eval_size, &mut rng);
        t.eval_x = x;
        t.eval_y = y;
        t
    }

    pub fn labels(&self, x: &DenseMatrix) -> Vec<usize> {
        let logits = mlp_logits(&self.teacher, self.activation, x);
        let c = logits.cols();
        (0..x.rows())
            .map(|i| {
                let row = &logits.as_slice()[i * c..(i + 1) * c];
                (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect()
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> (DenseMatrix, Vec<usize>) {
        let x = gaussian(n, self.input_dim, 1.0, rng);
        let y = self.labels(&x);
        (x, y)
    }

    /// The global batch of `step`; independent of the rank count.
    pub fn batch(&self, step: u64, size: usize) -> (DenseMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step + 1);
        self.sample(size, &mut rng)
    }
}

#[derive(Debug, Clone)]
pub enum Task {
    Quadratic(QuadraticTask),
    Classifier(ClassifierTask),
}

/// Shard loss, gradients, and the shard's weight in the global average.
#[derive(Debug, Clone)]
pub struct ShardGrad {
    pub loss: f64,
    pub grads: Vec<DenseMatrix>,
    pub weight: f64,
}

impl Task {
    pub fn build(cfg: &RunConfig) -> Result<Self, HarnessError> {
        match &cfg.task {
            TaskConfig::IllConditionedQuadratic {
                rows,
                out_cols,
                kappa,
                seed,
            } => {
                let (m, n) = cfg.model.param_shapes()[0];
                Ok(Task::Quadratic(QuadraticTask::generate(m, n, *rows, *out_cols, *kappa, *seed)))
            }
            TaskConfig::SyntheticClassifier {
                teacher_seed,
                eval_size,
                teacher_scale,
            } => Ok(Task::Classifier(ClassifierTask::generate(
                &cfg.model,
                *teacher_seed,
                *teacher_scale,
                *eval_size,
                cfg.seed,
            ))),
        }
    }

    pub fn init_params(&self, cfg: &RunConfig) -> Vec<DenseMatrix> {
        match self {
            Task::Quadratic(q) => vec![DenseMatrix::zeros(q.w_star.rows(), q.w_star.cols())],
            Task::Classifier(_) => init_weights(&cfg.model, cfg.model.seed, 1.0),
        }
    }

    pub fn shard_grad(&self, params: &[DenseMatrix], step: u64, batch: usize, rank: usize, world: usize) -> ShardGrad {
        match self {
            Task::Quadratic(q) => {
                let rows = shard_range(q.a.rows(), rank, world);
                let weight = rows.len() as f64;
                let (loss, g) = q.shard_loss_grad(&params[0], rows);
                ShardGrad {
                    loss,
                    grads: vec![g],
                    weight,
                }
            }
            Task::Classifier(c) => {
                let (x, y) = c.batch(step, batch);
                let r = shard_range(batch, rank, world);
                let xs = x.block(r.start, 0, r.len(), x.cols());
                let (loss, grads) = mlp_loss_grad(params, c.activation, &xs, &y[r.clone()]);
                ShardGrad {
                    loss,
                    grads,
                    weight: r.len() as f64,
                }
            }
        }
    }

    pub fn eval_loss(&self, params: &[DenseMatrix]) -> f64 {
        match self {
            Task::Quadratic(q) => q.loss(&params[0]),
            Task::Classifier(c) => mlp_loss_grad(params, c.activation, &c.eval_x, &c.eval_y).0,
        }
    }
}

/// Largest per-tensor relative error between `grads` and central finite
/// differences of `f` at `params`, measured in the max norm.
pub fn finite_difference_error(
    params: &[DenseMatrix],
    grads: &[DenseMatrix],
    h: f64,
    f: impl Fn(&[DenseMatrix]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for (k, g) in grads.iter().enumerate() {
        let mut fd = DenseMatrix::zeros(g.rows(), g.cols());
        for idx in 0..g.as_slice().len() {
            let orig = p[k].as_slice()[idx];
            p[k].as_mut_slice()[idx] = orig + h;
            let up = f(&p);
            p[k].as_mut_slice()[idx] = orig - h;
            let down = f(&p);
            p[k].as_mut_slice()[idx] = orig;
            fd.as_mut_slice()[idx] = (up - down) / (2.0 * h);
        }
        let mut diff = fd.clone();
        diff.axpy(-1.0, g).unwrap();
        let denom = g.max_abs().max(fd.max_abs());
        if denom > 0.0 {
            worst = worst.max(diff.max_abs() / denom);
        }
    }
    worst
}

/// Checks the task's analytic gradient of the step-0 batch at the initial
/// parameters against central differences.
pub fn gradient_check(cfg: &RunConfig) -> Result<f64, HarnessError> {
    cfg.validate()?;
    if cfg.model.dims.iter().any(|&d| d > 32) {
        return Err(HarnessError::ConfigInvalid("gradient check expects dims of at most 32".into()));
    }
    let task = Task::build(cfg)?;
    let params = task.init_params(cfg);
    let sg = task.shard_grad(&params, 0, cfg.batch_size, 0, 1);
    Ok(finite_difference_error(&params, &sg.grads, 1e-5, |p| {
        task.shard_grad(p, 0, cfg.batch_size, 0, 1).loss
    }))
}
