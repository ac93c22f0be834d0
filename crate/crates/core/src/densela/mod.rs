//! Dense symmetric linear algebra.
//!
//! Everything here is a pure function over immutable inputs and runs in
//! 64-bit floats, so the routines can be called from any number of worker
//! threads at once. The eigensolver is cyclic Jacobi with a fixed sweep
//! budget; inverse roots are formed from the eigendecomposition so that the
//! same factorization also yields the eigenbases needed by rotated-Adam
//! preconditioning.

mod dense;
mod eig;
mod roots;
mod sym;

pub use dense::{gram_left, gram_right, matmul, DenseMatrix};
pub use eig::{sym_eig, EigenPair, JACOBI_MAX_SWEEPS, JACOBI_REL_TOL};
pub use roots::{inv_root, relative_damping};
pub use sym::{pack_spd, packed_len, unpack_spd, Layout, SymMatrix};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix contains NaN or infinite entries")]
    NonFinite,
    #[error("Jacobi iteration did not converge within {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("damped eigenvalue {value:e} is not positive")]
    NotPsd { value: f64 },
    #[error("expected {expected:?} layout, found {found:?}")]
    LayoutMismatch { expected: Layout, found: Layout },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not symmetric (|a_ij - a_ji| = {diff:e})")]
    NotSymmetric { diff: f64 },
    #[error("invalid root order {0}; must be positive")]
    InvalidRootOrder(u32),
}

pub type Result<T> = std::result::Result<T, LinalgError>;
