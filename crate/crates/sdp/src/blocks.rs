use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::problem::{BlockKind, BlockSparse};

/// Dense value of one block of a primal or dual cone variable.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockValue {
    Psd(DMatrix<f64>),
    Lp(DVector<f64>),
}

impl BlockValue {
    pub fn zeros(kind: BlockKind) -> Self {
        match kind {
            BlockKind::Psd(n) => BlockValue::Psd(DMatrix::zeros(n, n)),
            BlockKind::Lp(n) => BlockValue::Lp(DVector::zeros(n)),
        }
    }

    /// Smallest eigenvalue (PSD blocks) or smallest entry (LP blocks).
    pub fn min_eigenvalue(&self) -> f64 {
        match self {
            BlockValue::Psd(m) => SymmetricEigen::new(m.clone())
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min),
            BlockValue::Lp(v) => v.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn as_matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            BlockValue::Psd(m) => Some(m),
            BlockValue::Lp(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&DVector<f64>> {
        match self {
            BlockValue::Lp(v) => Some(v),
            BlockValue::Psd(_) => None,
        }
    }

    /// Frobenius inner product of two values of the same shape.
    pub fn dot(&self, other: &BlockValue) -> f64 {
        match (self, other) {
            (BlockValue::Psd(a), BlockValue::Psd(b)) => a.dot(b),
            (BlockValue::Lp(a), BlockValue::Lp(b)) => a.dot(b),
            _ => panic!("block shape mismatch"),
        }
    }
}

/// `<A, X>` for a sparse block matrix against dense block values.
pub fn sparse_dot(a: &BlockSparse, x: &[BlockValue]) -> f64 {
    a.entries
        .iter()
        .map(|e| match &x[e.block] {
            BlockValue::Psd(m) => {
                if e.row == e.col {
                    e.value * m[(e.row, e.col)]
                } else {
                    2.0 * e.value * m[(e.row, e.col)]
                }
            }
            BlockValue::Lp(v) => e.value * v[e.row],
        })
        .sum()
}

/// Adds `scale * A` into dense block values.
pub fn add_sparse(target: &mut [BlockValue], a: &BlockSparse, scale: f64) {
    for e in &a.entries {
        match &mut target[e.block] {
            BlockValue::Psd(m) => {
                m[(e.row, e.col)] += scale * e.value;
                if e.row != e.col {
                    m[(e.col, e.row)] += scale * e.value;
                }
            }
            BlockValue::Lp(v) => v[e.row] += scale * e.value,
        }
    }
}
