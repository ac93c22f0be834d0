use std::ops::Range;

use serde::{Deserialize, Serialize};

/// One tile of a matrix parameter preconditioned as its own block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub param_id: u32,
    pub row_range: Range<usize>,
    pub col_range: Range<usize>,
    pub block_dim_limit: usize,
}

impl BlockSpec {
    pub fn rows(&self) -> usize {
        self.row_range.len()
    }

    pub fn cols(&self) -> usize {
        self.col_range.len()
    }

    pub fn area(&self) -> usize {
        self.rows() * self.cols()
    }
}

fn split(len: usize, limit: usize) -> Vec<Range<usize>> {
    let len = len.max(1);
    (0..len.div_ceil(limit))
        .map(|k| k * limit..((k + 1) * limit).min(len))
        .collect()
}

/// Tiles a `(rows, cols)` parameter into blocks whose sides are at most
/// `limit`, in row-major tile order. A zero dimension is treated as one so
/// scalars become 1x1 blocks.
pub fn partition_param(param_id: u32, shape: (usize, usize), limit: usize) -> Vec<BlockSpec> {
    assert!(limit >= 1, "block_dim_limit must be at least 1");
    let rows = split(shape.0, limit);
    let cols = split(shape.1, limit);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for r in &rows {
        for c in &cols {
            out.push(BlockSpec {
                param_id,
                row_range: r.clone(),
                col_range: c.clone(),
                block_dim_limit: limit,
            });
        }
    }
    out
}
