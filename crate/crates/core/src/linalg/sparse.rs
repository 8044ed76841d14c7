use crate::error::{Error, Result};

/// Square sparse matrix in compressed-row layout.
///
/// Column indices are sorted within each row and unique.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(Error::InvalidSpec(format!("entry ({r}, {c}) outside {n}x{n} matrix")));
            }
            if !v.is_finite() {
                return Err(Error::NonFiniteBreakdown("matrix assembly"));
            }
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { n, row_ptr, cols, vals })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(pos) => self.vals[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate().take(self.n) {
            *yr = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn transpose(&self) -> Self {
        // from_triplets cannot fail on entries of a valid matrix
        Self::from_triplets(self.n, self.triplets().map(|(r, c, v)| (c, r, v))).expect("valid entries")
    }

    /// `a * self + b * other`
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::ShapeMismatch {
                expected: self.n,
                found: other.n,
            });
        }
        Self::from_triplets(
            self.n,
            self.triplets()
                .map(|(r, c, v)| (r, c, a * v))
                .chain(other.triplets().map(|(r, c, v)| (r, c, b * v))),
        )
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (r, c, v) in self.triplets() {
            d[r][c] = v;
        }
        d
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Lower and upper bandwidths `(kl, ku)`.
    pub fn bandwidths(&self) -> (usize, usize) {
        self.triplets().fold((0, 0), |(kl, ku), (r, c, _)| {
            if r > c {
                (kl.max(r - c), ku)
            } else {
                (kl, ku.max(c - r))
            }
        })
    }

    /// Largest entrywise difference, counting structurally missing entries as zero.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let diff = self.combine(1.0, other, -1.0).expect("same dimension");
        diff.max_abs()
    }

    pub fn is_symmetric(&self) -> bool {
        self.max_abs_diff(&self.transpose()) == 0.0
    }
}
