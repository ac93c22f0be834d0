use serde::{Deserialize, Serialize};

use super::dense::{f64s_from_le_bytes, f64s_to_le_bytes};
use super::{DenseMatrix, LinalgError, Result};

/// Relative tolerance used when validating that a full buffer is symmetric.
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    Full,
    PackedLower,
}

/// Number of stored values for a packed lower triangle of order `dim`.
#[inline]
pub const fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

#[inline]
fn packed_index(i: usize, j: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    r * (r + 1) / 2 + c
}

/// Symmetric matrix in either full row-major or packed lower-triangle form.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    storage: Vec<f64>,
    layout: Layout,
}

impl SymMatrix {
    /// Validates a full row-major buffer: length, finiteness and symmetry.
    pub fn from_full(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(LinalgError::ShapeMismatch(format!(
                "full {dim}x{dim} needs {} values, got {}",
                dim * dim,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        let scale = data.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
        for i in 0..dim {
            for j in 0..i {
                let diff = (data[i * dim + j] - data[j * dim + i]).abs();
                if diff > SYMMETRY_TOL * scale {
                    return Err(LinalgError::NotSymmetric { diff });
                }
            }
        }
        Ok(Self {
            dim,
            storage: data,
            layout: Layout::Full,
        })
    }

    pub(crate) fn from_full_unchecked(dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dim * dim);
        Self {
            dim,
            storage: data,
            layout: Layout::Full,
        }
    }

    pub fn from_packed(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != packed_len(dim) {
            return Err(LinalgError::ShapeMismatch(format!(
                "packed order {dim} needs {} values, got {}",
                packed_len(dim),
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self {
            dim,
            storage: data,
            layout: Layout::PackedLower,
        })
    }

    pub fn from_dense(m: &DenseMatrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(LinalgError::ShapeMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Self::from_full(m.rows(), m.as_slice().to_vec())
    }

    pub fn zeros(dim: usize) -> Self {
        Self::from_full_unchecked(dim, vec![0.0; dim * dim])
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diag(&vec![1.0; dim])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            data[i * n + i] = d;
        }
        Self::from_full_unchecked(n, data)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Raw storage in the current layout.
    pub fn storage(&self) -> &[f64] {
        &self.storage
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self.layout {
            Layout::Full => self.storage[i * self.dim + j],
            Layout::PackedLower => self.storage[packed_index(i, j)],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.storage.iter().all(|x| x.is_finite())
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.storage.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Frobenius norm, counting off-diagonal entries twice in packed form.
    pub fn frobenius(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let v = self.get(i, j);
                s += v * v;
            }
        }
        s.sqrt()
    }

    /// Full row-major copy regardless of layout.
    pub fn to_full_vec(&self) -> Vec<f64> {
        match self.layout {
            Layout::Full => self.storage.clone(),
            Layout::PackedLower => {
                let n = self.dim;
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..=i {
                        let v = self.storage[packed_index(i, j)];
                        out[i * n + j] = v;
                        out[j * n + i] = v;
                    }
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_vec_unchecked(self.dim, self.dim, self.to_full_vec())
    }

    /// Same matrix in full layout (no-op clone when already full).
    pub fn to_full(&self) -> SymMatrix {
        match self.layout {
            Layout::Full => self.clone(),
            Layout::PackedLower => Self::from_full_unchecked(self.dim, self.to_full_vec()),
        }
    }

    /// In-place `self = a * self + b * other` over full storage.
    pub fn blend(&mut self, a: f64, b: f64, other: &SymMatrix) -> Result<()> {
        if self.dim != other.dim {
            return Err(LinalgError::ShapeMismatch(format!(
                "blend order {} vs {}",
                self.dim, other.dim
            )));
        }
        if self.layout != Layout::Full {
            return Err(LinalgError::LayoutMismatch {
                expected: Layout::Full,
                found: self.layout,
            });
        }
        let n = self.dim;
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                self.storage[k] = a * self.storage[k] + b * other.get(i, j);
            }
        }
        Ok(())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        f64s_to_le_bytes(&self.storage)
    }

    pub fn from_le_bytes(dim: usize, layout: Layout, bytes: &[u8]) -> Result<Self> {
        let data = f64s_from_le_bytes(bytes)?;
        match layout {
            Layout::Full => {
                if data.len() != dim * dim {
                    return Err(LinalgError::ShapeMismatch(format!(
                        "full {dim}x{dim} from {} values",
                        data.len()
                    )));
                }
                if data.iter().any(|x| !x.is_finite()) {
                    return Err(LinalgError::NonFinite);
                }
                Ok(Self::from_full_unchecked(dim, data))
            }
            Layout::PackedLower => Self::from_packed(dim, data),
        }
    }
}

/// Packs a full symmetric matrix into its lower triangle.
pub fn pack_spd(m: &SymMatrix) -> Result<SymMatrix> {
    if m.layout != Layout::Full {
        return Err(LinalgError::LayoutMismatch {
            expected: Layout::Full,
            found: m.layout,
        });
    }
    let n = m.dim;
    let mut out = Vec::with_capacity(packed_len(n));
    for i in 0..n {
        out.extend_from_slice(&m.storage[i * n..i * n + i + 1]);
    }
    Ok(SymMatrix {
        dim: n,
        storage: out,
        layout: Layout::PackedLower,
    })
}

/// Expands a packed lower triangle into a full symmetric matrix.
pub fn unpack_spd(m: &SymMatrix) -> Result<SymMatrix> {
    if m.layout != Layout::PackedLower {
        return Err(LinalgError::LayoutMismatch {
            expected: Layout::PackedLower,
            found: m.layout,
        });
    }
    Ok(SymMatrix::from_full_unchecked(m.dim, m.to_full_vec()))
}
