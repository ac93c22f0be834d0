use super::{sym_eig, LinalgError, Result, SymMatrix};

/// `(lambda)^(-1/p)` with exact paths for the common square and fourth roots.
#[inline]
fn inv_pow(x: f64, p: u32) -> f64 {
    match p {
        1 => 1.0 / x,
        2 => 1.0 / x.sqrt(),
        4 => 1.0 / x.sqrt().sqrt(),
        _ => x.powf(-1.0 / p as f64),
    }
}

/// Computes `(m + damping * I)^(-1/p)` through the eigendecomposition of `m`.
pub fn inv_root(m: &SymMatrix, p: u32, damping: f64) -> Result<SymMatrix> {
    if p == 0 {
        return Err(LinalgError::InvalidRootOrder(p));
    }
    if !damping.is_finite() || damping < 0.0 {
        return Err(LinalgError::NonFinite);
    }
    let eig = sym_eig(m)?;
    if let Some(&bad) = eig.values.iter().find(|&&l| l + damping <= 0.0) {
        return Err(LinalgError::NotPsd {
            value: bad + damping,
        });
    }
    Ok(eig.reconstruct_with(|l| inv_pow(l + damping, p)))
}

/// Absolute damping `rel * trace(m) / dim`; falls back to `rel` itself when
/// the trace vanishes so an all-zero factor still has a finite inverse root.
pub fn relative_damping(m: &SymMatrix, rel: f64) -> f64 {
    if rel == 0.0 || m.dim() == 0 {
        return 0.0;
    }
    let mean_diag = m.trace() / m.dim() as f64;
    if mean_diag > 0.0 {
        rel * mean_diag
    } else {
        rel
    }
}
