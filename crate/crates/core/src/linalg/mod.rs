//! Sparse matrices, banded direct solves, conjugate gradient and power iteration.

mod band_lu;
mod krylov;
mod sparse;

pub use band_lu::BandLu;
pub use krylov::{conjugate_gradient, operator_norm, CgOutcome};
pub use sparse::SparseMatrix;

use crate::error::Result;

/// Direct factorization of a square sparse matrix.
pub type Factorization = BandLu;

pub fn factorize(matrix: &SparseMatrix) -> Result<Factorization> {
    BandLu::factorize(matrix)
}

pub fn solve(fact: &Factorization, rhs: &[f64]) -> Vec<f64> {
    fact.solve(rhs)
}
