use std::collections::BTreeMap;
use std::hash::Hasher;

use fnv::FnvHasher;

use super::{Accumulation, BlockSpec, Method, OptimizerConfig, PrecondError, Result};
use crate::densela::{
    gram_left, gram_right, inv_root, matmul, pack_spd, relative_damping, sym_eig, unpack_spd, DenseMatrix,
    EigenPair, SymMatrix,
};
use crate::tierstore::{TensorRole, TierTag};

/// Copies of a block's factors taken at dispatch time.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSnapshot {
    pub block_id: u32,
    pub step: u64,
    pub method: Method,
    pub l: SymMatrix,
    pub r: SymMatrix,
    /// Relative damping coefficient.
    pub damping: f64,
}

impl FactorSnapshot {
    /// FNV-1a over the factor bytes.
    pub fn checksum(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(&self.l.to_le_bytes());
        h.write(&self.r.to_le_bytes());
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefreshResult {
    Shampoo { inv_l: SymMatrix, inv_r: SymMatrix },
    Soap { eig_l: EigenPair, eig_r: EigenPair },
}

/// Pure refresh over a snapshot: damped inverse fourth roots for Shampoo,
/// eigenbases for SOAP.
pub fn refresh_inverse(snap: &FactorSnapshot) -> Result<RefreshResult> {
    match snap.method {
        Method::Shampoo => {
            let inv_l = inv_root(&snap.l, 4, relative_damping(&snap.l, snap.damping))?;
            let inv_r = inv_root(&snap.r, 4, relative_damping(&snap.r, snap.damping))?;
            Ok(RefreshResult::Shampoo { inv_l, inv_r })
        }
        Method::Soap => Ok(RefreshResult::Soap {
            eig_l: sym_eig(&snap.l)?,
            eig_r: sym_eig(&snap.r)?,
        }),
        Method::AdamW => Err(PrecondError::MethodMismatch),
    }
}

/// Second-order state of one parameter tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecondBlock {
    pub id: u32,
    pub spec: BlockSpec,
    pub method: Method,
    pub l: SymMatrix,
    pub r: SymMatrix,
    pub inv_l: SymMatrix,
    pub inv_r: SymMatrix,
    pub eig_l: Option<EigenPair>,
    pub eig_r: Option<EigenPair>,
    pub rotated_m: DenseMatrix,
    pub rotated_v: DenseMatrix,
    /// Moment updates so far; drives bias correction.
    pub moment_steps: u64,
    pub version: u64,
    pub last_refresh_step: u64,
    /// Step of the snapshot that produced the installed preconditioner.
    pub snapshot_step: Option<u64>,
    pub residency: BTreeMap<TensorRole, TierTag>,
}

fn hadamard_square(m: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * m.get(i, j))
}

impl PrecondBlock {
    pub fn new(id: u32, spec: BlockSpec, method: Method) -> Self {
        let (m, n) = (spec.rows(), spec.cols());
        let mut residency = BTreeMap::new();
        residency.insert(TensorRole::FactorL, TierTag::Hot);
        residency.insert(TensorRole::FactorR, TierTag::Hot);
        Self {
            id,
            spec,
            method,
            l: SymMatrix::zeros(m),
            r: SymMatrix::zeros(n),
            inv_l: SymMatrix::identity(m),
            inv_r: SymMatrix::identity(n),
            eig_l: None,
            eig_r: None,
            rotated_m: DenseMatrix::zeros(m, n),
            rotated_v: DenseMatrix::zeros(m, n),
            moment_steps: 0,
            version: 0,
            last_refresh_step: 0,
            snapshot_step: None,
            residency,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.spec.rows(), self.spec.cols())
    }

    fn check_grad(&self, g: &DenseMatrix) -> Result<()> {
        if g.shape() != self.shape() {
            return Err(PrecondError::ShapeMismatch(format!(
                "block {} is {:?}, gradient {:?}",
                self.id,
                self.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(PrecondError::NonFinite);
        }
        Ok(())
    }

    /// `L <- op(L, G G^T)`, `R <- op(R, G^T G)`.
    pub fn accumulate_factors(&mut self, g: &DenseMatrix, rule: Accumulation) -> Result<()> {
        self.check_grad(g)?;
        let (gl, gr) = (gram_left(g), gram_right(g));
        let (a, b) = match rule {
            Accumulation::Sum => (1.0, 1.0),
            Accumulation::Ema(beta) => (beta, 1.0 - beta),
        };
        self.l.blend(a, b, &gl)?;
        self.r.blend(a, b, &gr)?;
        Ok(())
    }

    pub fn snapshot(&self, step: u64, cfg: &OptimizerConfig) -> FactorSnapshot {
        FactorSnapshot {
            block_id: self.id,
            step,
            method: self.method,
            l: self.l.clone(),
            r: self.r.clone(),
            damping: cfg.damping,
        }
    }

    /// Installs a refresh computed from the snapshot taken at
    /// `snapshot_step`, at the step boundary `step`.
    pub fn install(&mut self, result: RefreshResult, snapshot_step: u64, step: u64) -> Result<()> {
        match (self.method, result) {
            (Method::Shampoo, RefreshResult::Shampoo { inv_l, inv_r }) => {
                self.inv_l = inv_l;
                self.inv_r = inv_r;
            }
            (Method::Soap, RefreshResult::Soap { eig_l, eig_r }) => {
                self.reproject_moments(&eig_l.vectors, &eig_r.vectors)?;
                self.eig_l = Some(eig_l);
                self.eig_r = Some(eig_r);
            }
            _ => return Err(PrecondError::MethodMismatch),
        }
        self.version += 1;
        self.last_refresh_step = step;
        self.snapshot_step = Some(snapshot_step);
        Ok(())
    }

    /// Synchronous refresh on the calling thread.
    pub fn refresh(&mut self, cfg: &OptimizerConfig, step: u64) -> Result<()> {
        let res = refresh_inverse(&self.snapshot(step, cfg))?;
        self.install(res, step, step)
    }

    /// Carries the rotated moments into new bases. The first moment maps
    /// through `P = Q_new^T Q_old` on each side; the second moment maps
    /// through the elementwise squares of `P`, which keeps it non-negative
    /// and is exact when the bases differ by a signed permutation.
    fn reproject_moments(&mut self, new_l: &DenseMatrix, new_r: &DenseMatrix) -> Result<()> {
        let (m, n) = self.shape();
        let old_l = self
            .eig_l
            .as_ref()
            .map(|e| e.vectors.clone())
            .unwrap_or_else(|| DenseMatrix::identity(m));
        let old_r = self
            .eig_r
            .as_ref()
            .map(|e| e.vectors.clone())
            .unwrap_or_else(|| DenseMatrix::identity(n));
        let pl = matmul(&new_l.transpose(), &old_l)?;
        let pr = matmul(&new_r.transpose(), &old_r)?;
        self.rotated_m = matmul(&matmul(&pl, &self.rotated_m)?, &pr.transpose())?;
        let (sl, sr) = (hadamard_square(&pl), hadamard_square(&pr));
        self.rotated_v = matmul(&matmul(&sl, &self.rotated_v)?, &sr.transpose())?;
        Ok(())
    }

    /// `inv_L · G · inv_R`.
    pub fn precondition_shampoo(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_grad(g)?;
        if self.version == 0 {
            return Err(PrecondError::StaleUninitialized(self.id));
        }
        let left = matmul(&self.inv_l.to_dense(), g)?;
        Ok(matmul(&left, &self.inv_r.to_dense())?)
    }

    /// `Q_L · adam(Q_L^T G Q_R) · Q_R^T`, updating the rotated moments.
    pub fn precondition_soap(&mut self, g: &DenseMatrix, cfg: &OptimizerConfig) -> Result<DenseMatrix> {
        self.check_grad(g)?;
        let (Some(el), Some(er)) = (&self.eig_l, &self.eig_r) else {
            return Err(PrecondError::StaleUninitialized(self.id));
        };
        let (ql, qr) = (&el.vectors, &er.vectors);
        let rotated = matmul(&matmul(&ql.transpose(), g)?, qr)?;
        self.moment_steps += 1;
        let t = self.moment_steps as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut step = rotated;
        let m = self.rotated_m.as_mut_slice();
        let v = self.rotated_v.as_mut_slice();
        for (k, x) in step.as_mut_slice().iter_mut().enumerate() {
            let gk = *x;
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            *x = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
        }
        Ok(matmul(&matmul(ql, &step)?, &qr.transpose())?)
    }

    pub fn precondition(&mut self, g: &DenseMatrix, cfg: &OptimizerConfig) -> Result<DenseMatrix> {
        match self.method {
            Method::Shampoo => self.precondition_shampoo(g),
            Method::Soap => self.precondition_soap(g, cfg),
            Method::AdamW => Err(PrecondError::MethodMismatch),
        }
    }

    /// Flattened Host-resident preconditioner state that replicas keep
    /// coherent: packed inverse factors for Shampoo, eigenbases for SOAP.
    pub fn host_payload(&self) -> Result<Vec<f64>> {
        match self.method {
            Method::Shampoo => {
                let mut out = pack_spd(&self.inv_l.to_full())?.storage().to_vec();
                out.extend_from_slice(pack_spd(&self.inv_r.to_full())?.storage());
                Ok(out)
            }
            Method::Soap => {
                let (Some(el), Some(er)) = (&self.eig_l, &self.eig_r) else {
                    return Err(PrecondError::StaleUninitialized(self.id));
                };
                let mut out = el.vectors.as_slice().to_vec();
                out.extend_from_slice(er.vectors.as_slice());
                Ok(out)
            }
            Method::AdamW => Err(PrecondError::MethodMismatch),
        }
    }

    /// Replaces the Host-resident state with a payload laid out as in
    /// [`PrecondBlock::host_payload`]. Eigenvalues are left untouched.
    pub fn load_host_payload(&mut self, payload: &[f64]) -> Result<()> {
        let (m, n) = self.shape();
        let mismatch = |want: usize| {
            PrecondError::ShapeMismatch(format!("host payload of {} values, expected {want}", payload.len()))
        };
        match self.method {
            Method::Shampoo => {
                let (pl, pr) = (m * (m + 1) / 2, n * (n + 1) / 2);
                if payload.len() != pl + pr {
                    return Err(mismatch(pl + pr));
                }
                self.inv_l = unpack_spd(&SymMatrix::from_packed(m, payload[..pl].to_vec())?)?;
                self.inv_r = unpack_spd(&SymMatrix::from_packed(n, payload[pl..].to_vec())?)?;
            }
            Method::Soap => {
                if payload.len() != m * m + n * n {
                    return Err(mismatch(m * m + n * n));
                }
                let (Some(el), Some(er)) = (&mut self.eig_l, &mut self.eig_r) else {
                    return Err(PrecondError::StaleUninitialized(self.id));
                };
                el.vectors = DenseMatrix::new(m, m, payload[..m * m].to_vec())?;
                er.vectors = DenseMatrix::new(n, n, payload[m * m..].to_vec())?;
            }
            Method::AdamW => return Err(PrecondError::MethodMismatch),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precond::partition_param;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(m: usize, n: usize, method: Method) -> PrecondBlock {
        let spec = partition_param(0, (m, n), 2048).remove(0);
        PrecondBlock::new(0, spec, method)
    }

    fn cfg0() -> OptimizerConfig {
        OptimizerConfig {
            damping: 0.0,
            ..OptimizerConfig::default()
        }
    }

    fn random(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn assert_close(a: &DenseMatrix, b: &DenseMatrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn sum_accumulation_of_identity() {
        let mut b = block(2, 2, Method::Shampoo);
        b.accumulate_factors(&DenseMatrix::identity(2), Accumulation::Sum).unwrap();
        assert_eq!(b.l, SymMatrix::identity(2));
        assert_eq!(b.r, SymMatrix::identity(2));
    }

    #[test]
    fn ema_accumulation_scales_gram() {
        let mut b = block(2, 2, Method::Soap);
        let g = DenseMatrix::from_diag(&[10f64.sqrt(), 10f64.sqrt()]);
        b.accumulate_factors(&g, Accumulation::Ema(0.9)).unwrap();
        for (x, y) in b.l.storage().iter().zip([1.0, 0.0, 0.0, 1.0]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = block(3, 4, Method::Shampoo);
        let mut want = vec![0.0; 9];
        for _ in 0..3 {
            let g = random(3, 4, &mut rng);
            b.accumulate_factors(&g, Accumulation::Sum).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for k in 0..4 {
                        s += g.get(i, k) * g.get(j, k);
                    }
                    want[i * 3 + j] += s;
                }
            }
        }
        assert_eq!(b.l.storage(), &want[..]);
    }

    #[test]
    fn identity_factors_give_identity_inverse() {
        let mut b = block(3, 3, Method::Shampoo);
        b.l = SymMatrix::identity(3);
        b.r = SymMatrix::identity(3);
        b.refresh(&cfg0(), 4).unwrap();
        assert_eq!(b.inv_l, SymMatrix::identity(3));
        assert_eq!(b.version, 1);
        assert_eq!(b.last_refresh_step, 4);
    }

    #[test]
    fn scalar_factor_root() {
        let mut b = block(2, 2, Method::Shampoo);
        b.l = SymMatrix::from_diag(&[16.0, 16.0]);
        b.r = SymMatrix::identity(2);
        b.refresh(&cfg0(), 0).unwrap();
        assert_eq!(b.inv_l, SymMatrix::from_diag(&[0.5, 0.5]));
    }

    #[test]
    fn uninitialized_block_refuses_to_precondition() {
        let b = block(2, 2, Method::Shampoo);
        assert_eq!(
            b.precondition_shampoo(&DenseMatrix::identity(2)),
            Err(PrecondError::StaleUninitialized(0))
        );
        let mut s = block(2, 2, Method::Soap);
        assert_eq!(
            s.precondition(&DenseMatrix::identity(2), &cfg0()),
            Err(PrecondError::StaleUninitialized(0))
        );
    }

    #[test]
    fn diagonal_gradient_is_whitened() {
        let mut b = block(2, 2, Method::Shampoo);
        let g = DenseMatrix::from_diag(&[2.0, 4.0]);
        b.accumulate_factors(&g, Accumulation::Sum).unwrap();
        b.refresh(&cfg0(), 0).unwrap();
        let out = b.precondition_shampoo(&g).unwrap();
        assert_close(&out, &DenseMatrix::identity(2), 1e-15);
    }

    #[test]
    fn scaled_identity_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = block(4, 3, Method::Shampoo);
        b.l = SymMatrix::from_diag(&[9.0; 4]);
        b.r = SymMatrix::from_diag(&[9.0; 3]);
        b.refresh(&cfg0(), 0).unwrap();
        let g = random(4, 3, &mut rng);
        let mut want = g.clone();
        want.scale(1.0 / 3.0);
        assert_close(&b.precondition_shampoo(&g).unwrap(), &want, 1e-10);
    }

    #[test]
    fn soap_first_step_is_sign_like() {
        let mut b = block(2, 3, Method::Soap);
        b.l = SymMatrix::from_diag(&[1.0, 2.0]);
        b.r = SymMatrix::from_diag(&[1.0, 2.0, 3.0]);
        b.refresh(&cfg0(), 0).unwrap();
        let cfg = OptimizerConfig {
            beta1: 0.0,
            ..cfg0()
        };
        let g = DenseMatrix::new(2, 3, vec![0.5, -2.0, 3.0, -0.1, 1.0, 7.0]).unwrap();
        let out = b.precondition_soap(&g, &cfg).unwrap();
        for (o, x) in out.as_slice().iter().zip(g.as_slice()) {
            let want = x / ((x * x).sqrt() + cfg.eps);
            assert!((o - want).abs() < 1e-12);
        }
    }

    #[test]
    fn soap_zero_gradient_decays_v() {
        let mut b = block(2, 2, Method::Soap);
        b.l = SymMatrix::from_diag(&[1.0, 2.0]);
        b.r = SymMatrix::from_diag(&[1.0, 2.0]);
        b.refresh(&cfg0(), 0).unwrap();
        b.rotated_v = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cfg = cfg0();
        let out = b.precondition_soap(&DenseMatrix::zeros(2, 2), &cfg).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
        for (v, w) in b.rotated_v.as_slice().iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert_eq!(*v, cfg.beta2 * w);
        }
    }

    #[test]
    fn soap_basis_permutation_reprojects_v() {
        let mut b = block(3, 1, Method::Soap);
        b.l = SymMatrix::from_diag(&[1.0, 2.0, 3.0]);
        b.r = SymMatrix::identity(1);
        b.refresh(&cfg0(), 0).unwrap();
        b.rotated_v = DenseMatrix::new(3, 1, vec![10.0, 20.0, 30.0]).unwrap();
        b.rotated_m = DenseMatrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        // L' = P L P^T with P reversing the coordinates.
        b.l = SymMatrix::from_diag(&[3.0, 2.0, 1.0]);
        b.refresh(&cfg0(), 1).unwrap();
        let q = &b.eig_l.as_ref().unwrap().vectors;
        assert_eq!(q.as_slice(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.rotated_v.as_slice(), &[30.0, 20.0, 10.0]);
        assert_eq!(b.rotated_m.as_slice(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn soap_is_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spd = |rng: &mut ChaCha8Rng| {
            let a = random(4, 4, rng);
            let mut m = matmul(&a, &a.transpose()).unwrap();
            for i in 0..4 {
                m.set(i, i, m.get(i, i) + 0.5);
            }
            SymMatrix::from_full_unchecked(4, DenseMatrix::from_fn(4, 4, |i, j| 0.5 * (m.get(i, j) + m.get(j, i))).into_vec())
        };
        let (l, r) = (spd(&mut rng), spd(&mut rng));
        let q = sym_eig(&spd(&mut rng)).unwrap().vectors;
        let rot = |s: &SymMatrix| {
            let d = matmul(&matmul(&q, &s.to_dense()).unwrap(), &q.transpose()).unwrap();
            SymMatrix::from_full_unchecked(4, DenseMatrix::from_fn(4, 4, |i, j| 0.5 * (d.get(i, j) + d.get(j, i))).into_vec())
        };
        let cfg = cfg0();
        let mut a = block(4, 4, Method::Soap);
        a.l = l.clone();
        a.r = r.clone();
        a.refresh(&cfg, 0).unwrap();
        let mut b = block(4, 4, Method::Soap);
        b.l = rot(&l);
        b.r = rot(&r);
        b.refresh(&cfg, 0).unwrap();
        for _ in 0..3 {
            let g = random(4, 4, &mut rng);
            let gq = matmul(&matmul(&q, &g).unwrap(), &q.transpose()).unwrap();
            let out_a = a.precondition_soap(&g, &cfg).unwrap();
            let out_b = b.precondition_soap(&gq, &cfg).unwrap();
            let back = matmul(&matmul(&q.transpose(), &out_b).unwrap(), &q).unwrap();
            assert_close(&back, &out_a, 1e-9);
        }
    }

    #[test]
    fn soap_with_identity_bases_matches_adam() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = block(3, 2, Method::Soap);
        b.l = SymMatrix::from_diag(&[1.0, 2.0, 3.0]);
        b.r = SymMatrix::from_diag(&[1.0, 2.0]);
        b.refresh(&cfg0(), 0).unwrap();
        let cfg = cfg0();
        let mut adam = crate::precond::AdamState::new(6);
        for _ in 0..10 {
            let g = random(3, 2, &mut rng);
            let want = crate::precond::adamw_step(&mut adam, &g, &cfg).unwrap();
            assert_close(&b.precondition_soap(&g, &cfg).unwrap(), &want, 1e-10);
        }
    }

    #[test]
    fn host_payload_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = block(3, 2, Method::Shampoo);
        b.accumulate_factors(&random(3, 2, &mut rng), Accumulation::Sum).unwrap();
        b.refresh(&OptimizerConfig::default(), 0).unwrap();
        let p = b.host_payload().unwrap();
        assert_eq!(p.len(), 6 + 3);
        let mut c = b.clone();
        c.inv_l = SymMatrix::identity(3);
        c.load_host_payload(&p).unwrap();
        assert_eq!(c.inv_l, b.inv_l);
    }

    #[test]
    fn snapshot_is_isolated_from_later_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = block(2, 2, Method::Shampoo);
        b.accumulate_factors(&random(2, 2, &mut rng), Accumulation::Sum).unwrap();
        let snap = b.snapshot(0, &cfg0());
        let sum = snap.checksum();
        b.accumulate_factors(&random(2, 2, &mut rng), Accumulation::Sum).unwrap();
        assert_eq!(snap.checksum(), sum);
        assert_ne!(b.snapshot(1, &cfg0()).checksum(), sum);
    }
}
