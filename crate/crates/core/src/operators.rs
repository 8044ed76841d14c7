//! Clamped biharmonic operator, convection-reaction terms and implicit time stepping.
//!
//! Time convention: with `M_k = I + dt L^k`, the forward march is
//! `M_k w^k = w^{k-1} + dt s^{k-1}` and the adjoint march is
//! `M_k^T psi^{k-1} = psi^k + dt g^k`. Forward sources are read on levels
//! `0..nt` and adjoint sources on levels `1..=nt`, which gives the exact identity
//!
//! `<psi^nt, w^nt> + dt sum_{k>=1} <g^k, w^k> = <psi^0, w^0> + dt sum_{k<nt} <psi^k, s^k>`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{BandLu, SparseMatrix};
use crate::mesh::{Grid, SpaceTimeField, SubdomainMask};

/// Reaction coefficient `a` and velocity field `B` (one component per axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub a: SpaceTimeField,
    pub b: Vec<SpaceTimeField>,
}

impl Coefficients {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            a: SpaceTimeField::zeros(grid),
            b: vec![SpaceTimeField::zeros(grid); grid.dim()],
        }
    }

    pub fn constant(grid: &Grid, a: f64, b: &[f64]) -> Self {
        let n = grid.n_interior();
        Self {
            a: SpaceTimeField::constant_in_time(grid, &vec![a; n]),
            b: (0..grid.dim())
                .map(|ax| SpaceTimeField::constant_in_time(grid, &vec![b.get(ax).copied().unwrap_or(0.0); n]))
                .collect(),
        }
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        self.a.check_grid(grid)?;
        if self.b.len() != grid.dim() {
            return Err(Error::ShapeMismatch {
                expected: grid.dim(),
                found: self.b.len(),
            });
        }
        for b in &self.b {
            b.check_grid(grid)?;
        }
        if !self.a.is_finite() || self.b.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFiniteBreakdown("operator coefficients"));
        }
        Ok(())
    }

    /// `self + scale * (g1, g2)`
    pub fn shifted(&self, scale: f64, g1: &SpaceTimeField, g2: &[SpaceTimeField]) -> Self {
        let mut out = self.clone();
        out.a.axpy(scale, g1);
        for (b, g) in out.b.iter_mut().zip(g2) {
            b.axpy(scale, g);
        }
        out
    }

    fn same_level(&self, k: usize, j: usize) -> bool {
        self.a.level(k) == self.a.level(j) && self.b.iter().all(|b| b.level(k) == b.level(j))
    }
}

/// Full problem data for the hierarchical control problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub grid: Grid,
    pub coeffs: Coefficients,
    /// Leader control region.
    pub leader: SubdomainMask,
    /// Follower control regions.
    pub control: [SubdomainMask; 2],
    /// Follower observation regions.
    pub observe: [SubdomainMask; 2],
    pub alpha: [f64; 2],
    pub mu: [f64; 2],
    pub targets: [SpaceTimeField; 2],
    pub u0: Vec<f64>,
    pub ubar0: Option<Vec<f64>>,
}

impl ProblemSpec {
    /// Zero coefficients, zero data, all regions equal to the full domain.
    pub fn homogeneous(grid: Grid, alpha: [f64; 2], mu: [f64; 2]) -> Self {
        let full = SubdomainMask::full(&grid);
        Self {
            coeffs: Coefficients::zeros(&grid),
            leader: full.clone(),
            control: [full.clone(), full.clone()],
            observe: [full.clone(), full],
            alpha,
            mu,
            targets: [SpaceTimeField::zeros(&grid), SpaceTimeField::zeros(&grid)],
            u0: vec![0.0; grid.n_interior()],
            ubar0: None,
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let n = g.n_interior();
        self.coeffs.check(g)?;
        for m in std::iter::once(&self.leader).chain(&self.control).chain(&self.observe) {
            if m.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: n,
                    found: m.len(),
                });
            }
            if m.is_empty() {
                return Err(Error::EmptyMask);
            }
        }
        for i in 0..2 {
            if !(self.mu[i] > 0.0) || !self.mu[i].is_finite() {
                return Err(Error::InvalidSpec(format!("mu_{} must be positive, got {}", i + 1, self.mu[i])));
            }
            if !(self.alpha[i] >= 0.0) || !self.alpha[i].is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "alpha_{} must be nonnegative, got {}",
                    i + 1,
                    self.alpha[i]
                )));
            }
            self.targets[i].check_grid(g)?;
            if !self.targets[i].is_finite() {
                return Err(Error::NonFiniteBreakdown("target field"));
            }
        }
        for v in std::iter::once(&self.u0).chain(self.ubar0.as_ref()) {
            if v.len() != n {
                return Err(Error::ShapeMismatch {
                    expected: n,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteBreakdown("initial data"));
            }
        }
        Ok(())
    }

    /// Every observation region must meet the leader region.
    pub fn require_controllability(&self) -> Result<()> {
        for (i, od) in self.observe.iter().enumerate() {
            if od.intersection(&self.leader).is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "observation region {} does not meet the leader region",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Forward operator `L` and its adjoint `L*` at one time level.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub forward: SparseMatrix,
    pub adjoint: SparseMatrix,
}

fn second_difference_1d(m: usize, h: f64) -> Vec<(usize, usize, f64)> {
    let c = 1.0 / (h * h);
    let mut t = Vec::with_capacity(3 * m);
    for i in 0..m {
        t.push((i, i, -2.0 * c));
        if i > 0 {
            t.push((i, i - 1, c));
        }
        if i + 1 < m {
            t.push((i, i + 1, c));
        }
    }
    t
}

/// 1D clamped fourth difference: ghost reflection `u_{-1} = u_1` with `u_0 = 0`.
fn clamped_fourth_difference_1d(m: usize, h: f64) -> Vec<(usize, usize, f64)> {
    let c = 1.0 / (h * h * h * h);
    let stencil = [1.0, -4.0, 6.0, -4.0, 1.0];
    let mut t = Vec::with_capacity(5 * m);
    for i in 0..m {
        for (o, &s) in stencil.iter().enumerate() {
            let j = i as isize + o as isize - 2;
            if j >= 0 && (j as usize) < m {
                t.push((i, j as usize, s * c));
            }
        }
        if i == 0 {
            t.push((0, 0, c));
        }
        if i + 1 == m {
            t.push((i, i, c));
        }
    }
    t
}

/// Clamped discrete bilaplacian on interior nodes (5-point in 1D, 13-point in 2D).
pub fn assemble_biharmonic(grid: &Grid) -> SparseMatrix {
    let (mx, my) = grid.interior_shape();
    let h = grid.h();
    let bx = clamped_fourth_difference_1d(mx, h[0]);
    if grid.dim() == 1 {
        return SparseMatrix::from_triplets(mx, bx).expect("finite stencil");
    }
    let by = clamped_fourth_difference_1d(my, h[1]);
    let dx = second_difference_1d(mx, h[0]);
    let dy = second_difference_1d(my, h[1]);
    let n = mx * my;
    let mut t = Vec::new();
    for j in 0..my {
        for &(r, c, v) in &bx {
            t.push((r + mx * j, c + mx * j, v));
        }
    }
    for i in 0..mx {
        for &(r, c, v) in &by {
            t.push((i + mx * r, i + mx * c, v));
        }
    }
    for &(ry, cy, vy) in &dy {
        for &(rx, cx, vx) in &dx {
            t.push((rx + mx * ry, cx + mx * cy, 2.0 * vx * vy));
        }
    }
    SparseMatrix::from_triplets(n, t).expect("finite stencil")
}

/// Neighbor of node `p` one step along `axis` in direction `dir`, if interior.
fn neighbor(grid: &Grid, p: usize, axis: usize, dir: isize) -> Option<usize> {
    let (mx, my) = grid.interior_shape();
    let (i, j) = ((p % mx) as isize, (p / mx) as isize);
    let (i, j) = if axis == 0 { (i + dir, j) } else { (i, j + dir) };
    if i < 0 || j < 0 || i >= mx as isize || j >= my as isize {
        None
    } else {
        Some(i as usize + mx * j as usize)
    }
}

/// Centered-difference gradient with zero boundary values; one vector per axis.
pub fn gradient(grid: &Grid, u: &[f64]) -> Vec<Vec<f64>> {
    (0..grid.dim())
        .map(|ax| {
            let c = 0.5 / grid.h()[ax];
            (0..u.len())
                .map(|p| {
                    let up = neighbor(grid, p, ax, 1).map_or(0.0, |q| u[q]);
                    let dn = neighbor(grid, p, ax, -1).map_or(0.0, |q| u[q]);
                    c * (up - dn)
                })
                .collect()
        })
        .collect()
}

/// Three-point Laplacian with zero boundary values.
pub fn laplacian(grid: &Grid, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    for ax in 0..grid.dim() {
        let c = 1.0 / (grid.h()[ax] * grid.h()[ax]);
        for (p, o) in out.iter_mut().enumerate() {
            let up = neighbor(grid, p, ax, 1).map_or(0.0, |q| u[q]);
            let dn = neighbor(grid, p, ax, -1).map_or(0.0, |q| u[q]);
            *o += c * (up - 2.0 * u[p] + dn);
        }
    }
    out
}

/// Squared Frobenius norm of the discrete Hessian at every node.
pub fn hessian_norm_sq(grid: &Grid, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    for ax in 0..grid.dim() {
        let c = 1.0 / (grid.h()[ax] * grid.h()[ax]);
        for (p, o) in out.iter_mut().enumerate() {
            let up = neighbor(grid, p, ax, 1).map_or(0.0, |q| u[q]);
            let dn = neighbor(grid, p, ax, -1).map_or(0.0, |q| u[q]);
            *o += (c * (up - 2.0 * u[p] + dn)).powi(2);
        }
    }
    if grid.dim() == 2 {
        let ux = &gradient(grid, u)[0];
        let uxy = &gradient(grid, ux)[1];
        out.iter_mut().zip(uxy).for_each(|(o, m)| *o += 2.0 * m * m);
    }
    out
}

/// Transpose of [`gradient`]: a centered discretization of `-div`.
pub fn gradient_transpose(grid: &Grid, g: &[Vec<f64>]) -> Vec<f64> {
    let n = grid.n_interior();
    let mut out = vec![0.0; n];
    for (ax, comp) in g.iter().enumerate() {
        let c = 0.5 / grid.h()[ax];
        for (p, o) in out.iter_mut().enumerate() {
            let up = neighbor(grid, p, ax, 1).map_or(0.0, |q| comp[q]);
            let dn = neighbor(grid, p, ax, -1).map_or(0.0, |q| comp[q]);
            *o += c * (dn - up);
        }
    }
    out
}

/// `L = bilaplacian + a + B.grad` and, assembled independently in divergence
/// form, `L* = bilaplacian + a - div(B .)`.
pub fn assemble_operators(grid: &Grid, coeffs: &Coefficients, level: usize) -> Result<DiscreteOperator> {
    let bih = assemble_biharmonic(grid);
    let n = grid.n_interior();
    let a = coeffs.a.level(level);
    let mut fwd: Vec<(usize, usize, f64)> = bih.triplets().collect();
    let mut adj = fwd.clone();
    for p in 0..n {
        fwd.push((p, p, a[p]));
        adj.push((p, p, a[p]));
    }
    for (ax, b) in coeffs.b.iter().enumerate() {
        let b = b.level(level);
        let c = 0.5 / grid.h()[ax];
        for p in 0..n {
            if let Some(q) = neighbor(grid, p, ax, 1) {
                fwd.push((p, q, b[p] * c));
                adj.push((p, q, -(b[q] * c)));
            }
            if let Some(q) = neighbor(grid, p, ax, -1) {
                fwd.push((p, q, -(b[p] * c)));
                adj.push((p, q, b[q] * c));
            }
        }
    }
    Ok(DiscreteOperator {
        forward: SparseMatrix::from_triplets(n, fwd)?,
        adjoint: SparseMatrix::from_triplets(n, adj)?,
    })
}

/// `I + dt L`
pub fn step_matrix(grid: &Grid, op: &SparseMatrix) -> SparseMatrix {
    SparseMatrix::identity(op.n())
        .combine(1.0, op, grid.dt())
        .expect("same dimension")
}

/// Factorized implicit-Euler steps for one coefficient set.
#[derive(Clone, Debug)]
pub struct Propagator {
    grid: Grid,
    /// `steps[k - 1]` factorizes `M_k`; repeated levels share one factorization.
    steps: Vec<Arc<BandLu>>,
}

impl Propagator {
    pub fn new(grid: &Grid, coeffs: &Coefficients) -> Result<Self> {
        coeffs.check(grid)?;
        let nt = grid.nt();
        let mut steps: Vec<Arc<BandLu>> = Vec::with_capacity(nt);
        for k in 1..=nt {
            if k > 1 && coeffs.same_level(k, k - 1) {
                let prev = steps[k - 2].clone();
                steps.push(prev);
                continue;
            }
            let op = assemble_operators(grid, coeffs, k)?;
            steps.push(Arc::new(BandLu::factorize(&step_matrix(grid, &op.forward))?));
        }
        Ok(Self {
            grid: grid.clone(),
            steps,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Number of distinct factorizations held.
    pub fn distinct_factorizations(&self) -> usize {
        let mut n = 0;
        for k in 0..self.steps.len() {
            if k == 0 || !Arc::ptr_eq(&self.steps[k], &self.steps[k - 1]) {
                n += 1;
            }
        }
        n
    }

    /// March `M_k w^k = w^{k-1} + dt s^{k-1}` from `w^0 = w0`.
    pub fn forward(&self, w0: &[f64], source: Option<&SpaceTimeField>) -> Result<SpaceTimeField> {
        let g = &self.grid;
        let n = g.n_interior();
        check_len(w0, n)?;
        if let Some(s) = source {
            s.check_grid(g)?;
        }
        let dt = g.dt();
        let mut w = SpaceTimeField::zeros(g);
        w.level_mut(0).copy_from_slice(w0);
        let mut rhs = vec![0.0; n];
        for k in 1..=g.nt() {
            rhs.copy_from_slice(w.level(k - 1));
            if let Some(s) = source {
                for (r, v) in rhs.iter_mut().zip(s.level(k - 1)) {
                    *r += dt * v;
                }
            }
            self.steps[k - 1].solve_in_place(&mut rhs);
            w.level_mut(k).copy_from_slice(&rhs);
        }
        if !w.is_finite() {
            return Err(Error::NonFiniteBreakdown("forward march"));
        }
        Ok(w)
    }

    /// March `M_k^T psi^{k-1} = psi^k + dt g^k` from `psi^nt = terminal`.
    pub fn adjoint(&self, terminal: &[f64], source: Option<&SpaceTimeField>) -> Result<SpaceTimeField> {
        let g = &self.grid;
        let n = g.n_interior();
        check_len(terminal, n)?;
        if let Some(s) = source {
            s.check_grid(g)?;
        }
        let dt = g.dt();
        let nt = g.nt();
        let mut psi = SpaceTimeField::zeros(g);
        psi.level_mut(nt).copy_from_slice(terminal);
        let mut rhs = vec![0.0; n];
        for k in (1..=nt).rev() {
            rhs.copy_from_slice(psi.level(k));
            if let Some(s) = source {
                for (r, v) in rhs.iter_mut().zip(s.level(k)) {
                    *r += dt * v;
                }
            }
            self.steps[k - 1].solve_transpose_in_place(&mut rhs);
            psi.level_mut(k - 1).copy_from_slice(&rhs);
        }
        if !psi.is_finite() {
            return Err(Error::NonFiniteBreakdown("adjoint march"));
        }
        Ok(psi)
    }
}

fn check_len(v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            found: v.len(),
        });
    }
    Ok(())
}

/// Forward solve with source `f chi_O + v1 chi_O1 + v2 chi_O2`.
pub fn solve_forward(
    spec: &ProblemSpec,
    f: &SpaceTimeField,
    v1: &SpaceTimeField,
    v2: &SpaceTimeField,
    w0: &[f64],
) -> Result<SpaceTimeField> {
    let prop = Propagator::new(&spec.grid, &spec.coeffs)?;
    let mut s = f.masked(&spec.leader);
    s.axpy(1.0, &v1.masked(&spec.control[0]));
    s.axpy(1.0, &v2.masked(&spec.control[1]));
    prop.forward(w0, Some(&s))
}

/// Adjoint solve with source `sources` and terminal value `psi_t`.
pub fn solve_adjoint(spec: &ProblemSpec, sources: &SpaceTimeField, psi_t: &[f64]) -> Result<SpaceTimeField> {
    let prop = Propagator::new(&spec.grid, &spec.coeffs)?;
    prop.adjoint(psi_t, Some(sources))
}
