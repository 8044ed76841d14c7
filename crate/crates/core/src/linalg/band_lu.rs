use super::SparseMatrix;
use crate::error::{Error, Result};

/// Pivots below this fraction of the largest matrix entry are treated as zero.
const PIVOT_RTOL: f64 = 1e-14;

/// Banded LU factorization with partial pivoting.
///
/// Stored as the sequence of row interchanges and elimination steps
/// `M_{n-1} ... M_0 A = U`, which supports solves with both `A` and `A^T`.
/// Row `i` keeps columns `i - kl ..= i + kl + ku`, enough for the fill that
/// row interchanges introduce into `U`.
#[derive(Clone, Debug)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandLu {
    pub fn factorize(matrix: &SparseMatrix) -> Result<Self> {
        let n = matrix.n();
        let (kl, ku) = matrix.bandwidths();
        let width = 2 * kl + ku + 1;
        let mut lu = Self {
            n,
            kl,
            ku,
            width,
            band: vec![0.0; n * width],
            pivots: vec![0; n],
        };
        for (r, c, v) in matrix.triplets() {
            *lu.at_mut(r, c) = v;
        }
        let threshold = PIVOT_RTOL * matrix.max_abs().max(f64::MIN_POSITIVE);
        let upper = kl + ku;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + upper).min(n - 1);
            let mut p = k;
            let mut best = lu.at(k, k).abs();
            for r in k + 1..=last_row {
                let v = lu.at(r, k).abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if !(best > threshold) {
                return Err(Error::SingularMatrix {
                    row: k,
                    pivot: best,
                    threshold,
                });
            }
            lu.pivots[k] = p;
            if p != k {
                for j in k..=last_col {
                    let a = lu.at(k, j);
                    let b = lu.at(p, j);
                    *lu.at_mut(k, j) = b;
                    *lu.at_mut(p, j) = a;
                }
            }
            let pivot = lu.at(k, k);
            for r in k + 1..=last_row {
                let l = lu.at(r, k) / pivot;
                *lu.at_mut(r, k) = l;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        let u = lu.at(k, j);
                        *lu.at_mut(r, j) -= l * u;
                    }
                }
            }
        }
        Ok(lu)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.band[r * self.width + c + self.kl - r]
    }

    #[inline]
    fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.band[r * self.width + c + self.kl - r]
    }

    /// Solves `A x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            x.swap(k, self.pivots[k]);
            let xk = x[k];
            if xk != 0.0 {
                for r in k + 1..=(k + self.kl).min(n.saturating_sub(1)) {
                    x[r] -= self.at(r, k) * xk;
                }
            }
        }
        let upper = self.kl + self.ku;
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + upper).min(n - 1) {
                s -= self.at(i, j) * x[j];
            }
            x[i] = s / self.at(i, i);
        }
    }

    /// Solves `A^T x = rhs` with the same factors.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_transpose_in_place(&mut x);
        x
    }

    pub fn solve_transpose_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        let upper = self.kl + self.ku;
        // U^T y = rhs
        for i in 0..n {
            let mut s = x[i];
            for j in i.saturating_sub(upper)..i {
                s -= self.at(j, i) * x[j];
            }
            x[i] = s / self.at(i, i);
        }
        // x = M_0^T ... M_{n-1}^T y
        for k in (0..n).rev() {
            let mut s = 0.0;
            for r in k + 1..=(k + self.kl).min(n - 1) {
                s += self.at(r, k) * x[r];
            }
            x[k] -= s;
            x.swap(k, self.pivots[k]);
        }
    }
}
