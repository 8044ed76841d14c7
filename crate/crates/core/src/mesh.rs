//! Rectangular space-time grids, node masks and discrete quadrature.
//!
//! Unknowns live on interior nodes only; boundary nodes carry the clamped
//! value zero and never appear in storage. Interior node `(i, j)` maps to the
//! flat index `i + mx * j`, where `mx = nx[0] - 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform tensor grid on `[0, L1] (x [0, L2])` with `nt` backward-Euler steps on `[0, T]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    lengths: [f64; 2],
    nx: [usize; 2],
    t_final: f64,
    nt: usize,
    h: [f64; 2],
    dt: f64,
}

impl Grid {
    /// Smallest node count per axis that leaves room for the 13-point stencil.
    pub const MIN_NODES: usize = 6;
    pub const MIN_STEPS: usize = 4;

    pub fn new(dim: usize, lengths: &[f64], nx: &[usize], t_final: f64, nt: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if lengths.len() != dim || nx.len() != dim {
            return Err(Error::InvalidGrid(format!(
                "expected {dim} lengths and node counts, got {} and {}",
                lengths.len(),
                nx.len()
            )));
        }
        let mut l = [0.0; 2];
        let mut n = [1usize; 2];
        let mut h = [0.0; 2];
        for axis in 0..dim {
            if !(lengths[axis].is_finite() && lengths[axis] > 0.0) {
                return Err(Error::InvalidGrid(format!("length {} must be positive", lengths[axis])));
            }
            if nx[axis] < Self::MIN_NODES {
                return Err(Error::InvalidGrid(format!(
                    "nx = {} on axis {axis}, need at least {}",
                    nx[axis],
                    Self::MIN_NODES
                )));
            }
            l[axis] = lengths[axis];
            n[axis] = nx[axis];
            h[axis] = lengths[axis] / (nx[axis] - 1) as f64;
        }
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(Error::InvalidGrid(format!("final time {t_final} must be positive")));
        }
        if nt < Self::MIN_STEPS {
            return Err(Error::InvalidGrid(format!("nt = {nt}, need at least {}", Self::MIN_STEPS)));
        }
        Ok(Self {
            dim,
            lengths: l,
            nx: n,
            t_final,
            nt,
            h,
            dt: t_final / nt as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths[..self.dim]
    }

    pub fn nx(&self) -> &[usize] {
        &self.nx[..self.dim]
    }

    pub fn h(&self) -> &[f64] {
        &self.h[..self.dim]
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    /// Interior node counts `(mx, my)`; `my = 1` in 1D.
    pub fn interior_shape(&self) -> (usize, usize) {
        let mx = self.nx[0] - 2;
        let my = if self.dim == 2 { self.nx[1] - 2 } else { 1 };
        (mx, my)
    }

    pub fn n_interior(&self) -> usize {
        let (mx, my) = self.interior_shape();
        mx * my
    }

    /// Quadrature weight of one interior node: each axis `[0, L]` is split
    /// into `nx - 2` equal cells, one per interior node, so constants and
    /// linear profiles integrate exactly.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim)
            .map(|a| self.lengths[a] / (self.nx[a] - 2) as f64)
            .product()
    }

    /// Coordinates of interior node `p`; the second entry is 0 in 1D.
    pub fn coords(&self, p: usize) -> [f64; 2] {
        let (mx, _) = self.interior_shape();
        let i = p % mx;
        let j = p / mx;
        let y = if self.dim == 2 { (j + 1) as f64 * self.h[1] } else { 0.0 };
        [(i + 1) as f64 * self.h[0], y]
    }

    /// Interior node values of a function of space.
    pub fn sample(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        (0..self.n_interior()).map(|p| f(self.coords(p))).collect()
    }
}

/// 0/1 indicator on interior nodes, realizing a characteristic function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubdomainMask {
    nodes: Vec<bool>,
}

impl SubdomainMask {
    /// Marks interior nodes inside the closed box `lo <= x <= hi` per axis.
    pub fn from_box(grid: &Grid, bounds: &[(f64, f64)]) -> Result<Self> {
        if bounds.len() != grid.dim() {
            return Err(Error::InvalidSpec(format!(
                "box has {} axes, grid has {}",
                bounds.len(),
                grid.dim()
            )));
        }
        let slack: Vec<f64> = grid.h().iter().map(|h| 1e-9 * h).collect();
        let nodes: Vec<bool> = (0..grid.n_interior())
            .map(|p| {
                let x = grid.coords(p);
                bounds
                    .iter()
                    .enumerate()
                    .all(|(axis, &(lo, hi))| x[axis] >= lo - slack[axis] && x[axis] <= hi + slack[axis])
            })
            .collect();
        if !nodes.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
        Ok(Self { nodes })
    }

    pub fn full(grid: &Grid) -> Self {
        Self {
            nodes: vec![true; grid.n_interior()],
        }
    }

    pub fn empty(grid: &Grid) -> Self {
        Self {
            nodes: vec![false; grid.n_interior()],
        }
    }

    pub fn from_nodes(nodes: Vec<bool>) -> Self {
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.nodes.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.nodes.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, p: usize) -> bool {
        self.nodes[p]
    }

    pub fn nodes(&self) -> &[bool] {
        &self.nodes
    }

    pub fn indicator(&self) -> Vec<f64> {
        self.nodes.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            nodes: self.nodes.iter().zip(&other.nodes).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn intersection(&self, other: &Self) -> Self {
        Self {
            nodes: self.nodes.iter().zip(&other.nodes).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.intersection(other).is_empty()
    }

    /// Zeroes every entry outside the mask.
    pub fn restrict(&self, values: &mut [f64]) {
        for (v, &inside) in values.iter_mut().zip(&self.nodes) {
            if !inside {
                *v = 0.0;
            }
        }
    }

    /// Mean coordinate of the marked nodes.
    pub fn centroid(&self, grid: &Grid) -> Option<[f64; 2]> {
        let mut c = [0.0; 2];
        let mut n = 0usize;
        for p in (0..self.nodes.len()).filter(|&p| self.nodes[p]) {
            let x = grid.coords(p);
            c[0] += x[0];
            c[1] += x[1];
            n += 1;
        }
        (n > 0).then(|| [c[0] / n as f64, c[1] / n as f64])
    }

    /// Per-axis closed hull `[min, max]` of the marked node coordinates.
    pub fn hull(&self, grid: &Grid) -> Option<Vec<(f64, f64)>> {
        let mut out: Option<Vec<(f64, f64)>> = None;
        for p in (0..self.nodes.len()).filter(|&p| self.nodes[p]) {
            let x = grid.coords(p);
            let hull = out.get_or_insert_with(|| (0..grid.dim()).map(|a| (x[a], x[a])).collect());
            for (axis, (lo, hi)) in hull.iter_mut().enumerate() {
                *lo = lo.min(x[axis]);
                *hi = hi.max(x[axis]);
            }
        }
        out
    }
}

/// Real value per interior node and time level `k = 0..=nt`, stored level-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeField {
    n: usize,
    nt: usize,
    values: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(grid: &Grid) -> Self {
        Self::with_shape(grid.n_interior(), grid.nt())
    }

    pub fn with_shape(n: usize, nt: usize) -> Self {
        Self {
            n,
            nt,
            values: vec![0.0; n * (nt + 1)],
        }
    }

    pub fn from_values(n: usize, nt: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * (nt + 1) {
            return Err(Error::ShapeMismatch {
                expected: n * (nt + 1),
                found: values.len(),
            });
        }
        Ok(Self { n, nt, values })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 2], f64) -> f64) -> Self {
        let mut out = Self::zeros(grid);
        for k in 0..=grid.nt() {
            let t = grid.time(k);
            for (p, v) in out.level_mut(k).iter_mut().enumerate() {
                *v = f(grid.coords(p), t);
            }
        }
        out
    }

    /// Repeats a spatial field at every level.
    pub fn constant_in_time(grid: &Grid, spatial: &[f64]) -> Self {
        let mut out = Self::zeros(grid);
        for k in 0..=grid.nt() {
            out.level_mut(k).copy_from_slice(spatial);
        }
        out
    }

    pub fn n_space(&self) -> usize {
        self.n
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.n..(k + 1) * self.n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n && self.nt == other.nt
    }

    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        let expected = grid.n_interior() * (grid.nt() + 1);
        if self.n != grid.n_interior() || self.nt != grid.nt() {
            return Err(Error::ShapeMismatch {
                expected,
                found: self.values.len(),
            });
        }
        Ok(())
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    /// Copy with entries outside `mask` set to zero at every level.
    pub fn masked(&self, mask: &SubdomainMask) -> Self {
        let mut out = self.clone();
        for k in 0..=self.nt {
            mask.restrict(out.level_mut(k));
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Time quadrature rule for space-time integrals.
///
/// `Left` sums levels `0..nt` (control-like fields), `Right` sums `1..=nt`
/// (state-like fields); `Trapezoid` is their average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeRule {
    Trapezoid,
    Left,
    Right,
}

impl TimeRule {
    pub fn weight(self, k: usize, nt: usize) -> f64 {
        match self {
            TimeRule::Trapezoid if k == 0 || k == nt => 0.5,
            TimeRule::Trapezoid => 1.0,
            TimeRule::Left if k < nt => 1.0,
            TimeRule::Right if k > 0 => 1.0,
            _ => 0.0,
        }
    }
}

/// `cell_volume * dt * sum` of `field * weight` over masked nodes, trapezoidal in time.
pub fn integrate(
    grid: &Grid,
    field: &SpaceTimeField,
    mask: &SubdomainMask,
    weight: Option<&SpaceTimeField>,
) -> Result<f64> {
    integrate_with(grid, field, mask, weight, TimeRule::Trapezoid)
}

pub fn integrate_with(
    grid: &Grid,
    field: &SpaceTimeField,
    mask: &SubdomainMask,
    weight: Option<&SpaceTimeField>,
    rule: TimeRule,
) -> Result<f64> {
    field.check_grid(grid)?;
    if mask.len() != grid.n_interior() {
        return Err(Error::ShapeMismatch {
            expected: grid.n_interior(),
            found: mask.len(),
        });
    }
    if let Some(w) = weight {
        w.check_grid(grid)?;
    }
    let nt = grid.nt();
    let mut total = 0.0;
    for k in 0..=nt {
        let c = rule.weight(k, nt);
        if c == 0.0 {
            continue;
        }
        let f = field.level(k);
        let level_sum: f64 = match weight {
            Some(w) => {
                let w = w.level(k);
                (0..f.len()).filter(|&p| mask.contains(p)).map(|p| f[p] * w[p]).sum()
            }
            None => (0..f.len()).filter(|&p| mask.contains(p)).map(|p| f[p]).sum(),
        };
        total += c * level_sum;
    }
    Ok(total * grid.cell_volume() * grid.dt())
}

/// Space-time inner product `int_0^T int_mask a b` under `rule`.
pub fn inner_st(grid: &Grid, a: &SpaceTimeField, b: &SpaceTimeField, mask: &SubdomainMask, rule: TimeRule) -> f64 {
    let nt = grid.nt();
    let mut total = 0.0;
    for k in 0..=nt {
        let c = rule.weight(k, nt);
        if c == 0.0 {
            continue;
        }
        let (x, y) = (a.level(k), b.level(k));
        let s: f64 = (0..x.len()).filter(|&p| mask.contains(p)).map(|p| x[p] * y[p]).sum();
        total += c * s;
    }
    total * grid.cell_volume() * grid.dt()
}

pub fn norm_st(grid: &Grid, a: &SpaceTimeField, mask: &SubdomainMask, rule: TimeRule) -> f64 {
    inner_st(grid, a, a, mask, rule).max(0.0).sqrt()
}

/// Discrete spatial inner product `<u, v>_h = cell_volume * sum u v`.
pub fn inner_h(grid: &Grid, u: &[f64], v: &[f64]) -> f64 {
    grid.cell_volume() * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
}

pub fn norm_h(grid: &Grid, u: &[f64]) -> f64 {
    inner_h(grid, u, u).max(0.0).sqrt()
}
