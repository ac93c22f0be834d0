use super::{DenseMatrix, LinalgError, Result, SymMatrix};

/// Sweep budget for cyclic Jacobi.
pub const JACOBI_MAX_SWEEPS: usize = 30;
/// Convergence when the off-diagonal Frobenius norm falls below this
/// fraction of the input's Frobenius norm.
pub const JACOBI_REL_TOL: f64 = 1e-12;

/// Eigenvalues in ascending order with matching eigenvector columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl EigenPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V diag(f(lambda)) V^T`, symmetric by construction.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim();
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let v = self.vectors.as_slice();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..n {
                    s += v[i * n + k] * fv[k] * v[j * n + k];
                }
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        SymMatrix::from_full_unchecked(n, out)
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.reconstruct_with(|l| l)
    }
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(m: &SymMatrix) -> Result<EigenPair> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = m.dim();
    let mut a = m.to_full_vec();
    let mut v = DenseMatrix::identity(n).into_vec(); // V^T
    let norm = m.frobenius();
    let tol = JACOBI_REL_TOL * norm;

    let mut converged = norm == 0.0 || n < 2;
    let mut off = 0.0;
    if !converged {
        for _sweep in 0..JACOBI_MAX_SWEEPS {
            off = off_diagonal_norm(&a, n);
            if off <= tol {
                converged = true;
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    rotate(&mut a, &mut v, n, p, q);
                }
            }
        }
        if !converged {
            off = off_diagonal_norm(&a, n);
            converged = off <= tol;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            off_norm: off,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            vectors.set(i, dst, v[src * n + i]);
        }
    }
    Ok(EigenPair { values, vectors })
}

/// One Jacobi rotation annihilating `a[p][q]`; accumulates into `v`
/// (row-major `V^T`).
#[inline]
fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = a[p * n + p];
    let aqq = a[q * n + q];
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    // A <- J^T A J. A stays exactly symmetric, so off-block entries of
    // rows p, q are computed once and mirrored into columns p, q.
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let apk = a[p * n + k];
        let aqk = a[q * n + k];
        let np = c * apk - s * aqk;
        let nq = s * apk + c * aqk;
        a[p * n + k] = np;
        a[q * n + k] = nq;
        a[k * n + p] = np;
        a[k * n + q] = nq;
    }
    let (pp, pq, qp, qq) = (a[p * n + p], a[p * n + q], a[q * n + p], a[q * n + q]);
    let (pp, pq) = (c * pp - s * pq, s * pp + c * pq);
    let (qp, qq) = (c * qp - s * qq, s * qp + c * qq);
    a[p * n + p] = c * pp - s * qp;
    a[q * n + q] = s * pq + c * qq;
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    // V <- V J, with V stored transposed
    for k in 0..n {
        let vpk = v[p * n + k];
        let vqk = v[q * n + k];
        v[p * n + k] = c * vpk - s * vqk;
        v[q * n + k] = s * vpk + c * vqk;
    }
}
