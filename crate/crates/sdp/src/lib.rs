//! Block-diagonal semidefinite programming.
//!
//! Problems are held in standard primal form
//!
//! ```text
//!   minimize    <C, X>
//!   subject to  <A_i, X> = b_i,   i = 1..m
//!               X = diag(X_1, ..., X_p),  X_k PSD or elementwise nonnegative
//! ```
//!
//! with dual `maximize b'y  s.t.  C - sum_i y_i A_i = S`, `S` in the same cone.
//! [`solve`] runs a primal-dual interior-point method on the homogeneous
//! self-dual embedding, so infeasible problems terminate with a ray
//! certificate instead of running out of iterations. [`sdpa`] reads and
//! writes the SDPA sparse format.

mod blocks;
mod error;
mod problem;
pub mod sdpa;
mod solver;

pub use blocks::{add_sparse, sparse_dot, BlockValue};
pub use error::SdpError;
pub use problem::{BlockKind, BlockSparse, Entry, SdpProblem};
pub use solver::{
    solve, InfeasibilityCertificate, IterateLog, SdpSolution, SdpStatus, SolverOptions,
};
