use crate::error::SdpError;

/// Shape of one diagonal block of the cone variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Symmetric `n x n` matrix constrained to be positive semidefinite.
    Psd(usize),
    /// `n` scalars constrained to be nonnegative (a diagonal block).
    Lp(usize),
}

impl BlockKind {
    pub fn size(&self) -> usize {
        match *self {
            BlockKind::Psd(n) | BlockKind::Lp(n) => n,
        }
    }
}

/// One nonzero of a symmetric block matrix, stored in the upper triangle
/// (`row <= col`). Entries of LP blocks are diagonal (`row == col`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Sparse block-diagonal symmetric matrix. Off-diagonal entries stand for
/// both `(row, col)` and `(col, row)`, so `<A, X> = sum_diag v X_ii + 2 sum_off v X_ij`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockSparse {
    pub entries: Vec<Entry>,
}

impl BlockSparse {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, block: usize, row: usize, col: usize, value: f64) {
        let (row, col) = if row <= col { (row, col) } else { (col, row) };
        self.entries.push(Entry {
            block,
            row,
            col,
            value,
        });
    }

    /// Sorts entries and sums duplicates; drops exact zeros.
    pub fn compress(&mut self) {
        self.entries.sort_by_key(|a| (a.block, a.row, a.col));
        let mut out: Vec<Entry> = Vec::with_capacity(self.entries.len());
        for e in self.entries.drain(..) {
            match out.last_mut() {
                Some(last) if (last.block, last.row, last.col) == (e.block, e.row, e.col) => {
                    last.value += e.value
                }
                _ => out.push(e),
            }
        }
        out.retain(|e| e.value != 0.0);
        self.entries = out;
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A block SDP in standard primal form; see the crate docs.
#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    pub blocks: Vec<BlockKind>,
    pub objective: BlockSparse,
    pub constraints: Vec<BlockSparse>,
    pub rhs: Vec<f64>,
}

impl SdpProblem {
    pub fn new(blocks: Vec<BlockKind>) -> Self {
        Self {
            blocks,
            objective: BlockSparse::new(),
            constraints: Vec::new(),
            rhs: Vec::new(),
        }
    }

    pub fn add_constraint(&mut self, a: BlockSparse, b: f64) -> usize {
        self.constraints.push(a);
        self.rhs.push(b);
        self.constraints.len() - 1
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Checks index ranges, triangle storage, LP diagonality and finiteness.
    pub fn validate(&self) -> Result<(), SdpError> {
        if self.constraints.is_empty() {
            return Err(SdpError::NoConstraints);
        }
        if self.rhs.len() != self.constraints.len() {
            return Err(SdpError::Malformed(format!(
                "{} constraint matrices but {} right-hand sides",
                self.constraints.len(),
                self.rhs.len()
            )));
        }
        if let Some(k) = self.blocks.iter().position(|b| b.size() == 0) {
            return Err(SdpError::Malformed(format!("block {k} has size 0")));
        }
        let check = |m: &BlockSparse, what: &str| -> Result<(), SdpError> {
            for e in &m.entries {
                let kind = self.blocks.get(e.block).ok_or_else(|| {
                    SdpError::Malformed(format!("{what}: block {} out of range", e.block))
                })?;
                if e.row > e.col || e.col >= kind.size() {
                    return Err(SdpError::Malformed(format!(
                        "{what}: entry ({}, {}) invalid for block {} of size {}",
                        e.row,
                        e.col,
                        e.block,
                        kind.size()
                    )));
                }
                if matches!(kind, BlockKind::Lp(_)) && e.row != e.col {
                    return Err(SdpError::Malformed(format!(
                        "{what}: off-diagonal entry in LP block {}",
                        e.block
                    )));
                }
                if !e.value.is_finite() {
                    return Err(SdpError::Malformed(format!("{what}: non-finite value")));
                }
            }
            Ok(())
        };
        check(&self.objective, "objective")?;
        for (i, a) in self.constraints.iter().enumerate() {
            check(a, &format!("constraint {i}"))?;
        }
        if self.rhs.iter().any(|v| !v.is_finite()) {
            return Err(SdpError::Malformed("non-finite right-hand side".into()));
        }
        Ok(())
    }
}
