//! Semilinear hierarchy: quasi-equilibria, nonlinear null control and
//! second-order checks.

mod nonlinearity;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hum::{Hum, HumResult, HumSettings};
use crate::mesh::{inner_st, norm_st, Grid, SpaceTimeField, SubdomainMask, TimeRule};
use crate::nash::{AffineData, LinearModel, NashOptions, NashSolution};
use crate::operators::{gradient, gradient_transpose, Coefficients, ProblemSpec, Propagator};

pub use nonlinearity::{
    nonlinearity_from_spec, random_points, sample_bounds, BoundReport, ExprNonlinearity, GradTanh, Nonlinearity,
    SecondDerivatives, Tanh, Zero,
};

/// Consecutive growth steps tolerated in the outer loop.
const OUTER_STREAK: usize = 5;

/// Eight-point Gauss-Legendre rule on `[-1, 1]`, positive half.
const GL_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

fn unit_rule() -> impl Iterator<Item = (f64, f64)> {
    GL_NODES
        .iter()
        .zip(GL_WEIGHTS)
        .flat_map(|(&x, w)| [(0.5 * (1.0 - x), 0.5 * w), (0.5 * (1.0 + x), 0.5 * w)])
}

/// Per-level gradients of a field, padded to two components.
fn level_gradients(grid: &Grid, u: &SpaceTimeField) -> Vec<[Vec<f64>; 2]> {
    let n = grid.n_interior();
    (0..=grid.nt())
        .map(|k| {
            let mut g = gradient(grid, u.level(k));
            let gx = g.remove(0);
            let gy = if g.is_empty() { vec![0.0; n] } else { g.remove(0) };
            [gx, gy]
        })
        .collect()
}

/// Coefficient fields `(c, d)` in the shape the operator expects.
#[derive(Clone, Debug)]
pub struct CoefficientFields {
    pub g1: SpaceTimeField,
    pub g2: Vec<SpaceTimeField>,
}

impl CoefficientFields {
    fn zeros(grid: &Grid) -> Self {
        Self {
            g1: SpaceTimeField::zeros(grid),
            g2: vec![SpaceTimeField::zeros(grid); grid.dim()],
        }
    }

    pub fn max_total(&self) -> f64 {
        let mut m = 0.0_f64;
        for p in 0..self.g1.values().len() {
            let b: f64 = self.g2.iter().map(|g| g.values()[p].powi(2)).sum::<f64>().sqrt();
            m = m.max(self.g1.values()[p].abs() + b);
        }
        m
    }
}

/// Pointwise map over `(u, grad u)` pairs at every node and level.
fn pointwise(
    grid: &Grid,
    base: Option<&SpaceTimeField>,
    z: &SpaceTimeField,
    mut f: impl FnMut(f64, [f64; 2], f64, [f64; 2]) -> (f64, [f64; 2]),
) -> CoefficientFields {
    let mut out = CoefficientFields::zeros(grid);
    let gz = level_gradients(grid, z);
    let gb = base.map(|b| level_gradients(grid, b));
    let n = grid.n_interior();
    for k in 0..=grid.nt() {
        for p in 0..n {
            let (ub, pb) = match (base, &gb) {
                (Some(b), Some(g)) => (b.level(k)[p], [g[k][0][p], g[k][1][p]]),
                _ => (0.0, [0.0; 2]),
            };
            let (c, d) = f(ub, pb, z.level(k)[p], [gz[k][0][p], gz[k][1][p]]);
            out.g1.level_mut(k)[p] = c;
            for (a, g) in out.g2.iter_mut().enumerate() {
                g.level_mut(k)[p] = d[a];
            }
        }
    }
    out
}

/// Secant coefficients `int_0^1 (F_u, grad_p F)(base + tau z) dtau`.
///
/// They satisfy `G1 z + G2 . grad z = F(base + z) - F(base)` up to quadrature.
pub fn eval_secant_coeffs(
    nl: &dyn Nonlinearity,
    grid: &Grid,
    base: Option<&SpaceTimeField>,
    z: &SpaceTimeField,
) -> Result<CoefficientFields> {
    z.check_grid(grid)?;
    if let Some(b) = base {
        b.check_grid(grid)?;
    }
    let out = pointwise(grid, base, z, |ub, pb, zv, pz| {
        let (mut c, mut d) = (0.0, [0.0; 2]);
        for (tau, w) in unit_rule() {
            let u = ub + tau * zv;
            let p = [pb[0] + tau * pz[0], pb[1] + tau * pz[1]];
            c += w * nl.d_u(u, p);
            let g = nl.d_p(u, p);
            d[0] += w * g[0];
            d[1] += w * g[1];
        }
        (c, d)
    });
    if !out.g1.is_finite() || !out.g2.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteBreakdown("secant coefficients"));
    }
    Ok(out)
}

/// Linearization `(F_u, grad_p F)` along `v`.
pub fn eval_linearization(nl: &dyn Nonlinearity, grid: &Grid, v: &SpaceTimeField) -> Result<CoefficientFields> {
    v.check_grid(grid)?;
    let out = pointwise(grid, None, v, |_, _, u, p| (nl.d_u(u, p), nl.d_p(u, p)));
    if !out.g1.is_finite() || !out.g2.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteBreakdown("linearization"));
    }
    Ok(out)
}

/// `F(v, grad v)` at every node and level.
pub fn eval_nonlinearity(nl: &dyn Nonlinearity, grid: &Grid, v: &SpaceTimeField) -> SpaceTimeField {
    pointwise(grid, None, v, |_, _, u, p| (nl.value(u, p), [0.0; 2])).g1
}

fn shifted(base: &Coefficients, c: &CoefficientFields) -> Coefficients {
    base.shifted(-1.0, &c.g1, &c.g2)
}

/// `sqrt(||z||^2 + ||grad z||^2)` over the whole cylinder.
pub fn h1_norm(grid: &Grid, z: &SpaceTimeField) -> f64 {
    let full = SubdomainMask::full(grid);
    let mut s = norm_st(grid, z, &full, TimeRule::Right).powi(2);
    let g = level_gradients(grid, z);
    for a in 0..grid.dim() {
        let mut f = SpaceTimeField::zeros(grid);
        for (k, gk) in g.iter().enumerate() {
            f.level_mut(k).copy_from_slice(&gk[a]);
        }
        s += norm_st(grid, &f, &full, TimeRule::Right).powi(2);
    }
    s.sqrt()
}

fn constant_forcing(grid: &Grid, value: f64) -> Option<SpaceTimeField> {
    (value != 0.0).then(|| SpaceTimeField::constant_in_time(grid, &vec![value; grid.n_interior()]))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OuterOptions {
    pub tol_rel: f64,
    pub max_iter: usize,
    /// Relaxation `z <- z + damping (w - z)`, in `(0, 1]`.
    pub damping: f64,
    pub inner: NashOptions,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            tol_rel: 1e-10,
            max_iter: 50,
            damping: 1.0,
            inner: NashOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OuterStep {
    pub change: f64,
    /// `max |G1| + |G2|` for the frozen coefficients of this step.
    pub secant_max: f64,
}

/// Tracks the outer loop and decides when to stop.
struct OuterLoop {
    tol: f64,
    damping: f64,
    history: Vec<OuterStep>,
    prev_diff: f64,
    streak: usize,
}

enum Outer {
    Done,
    Continue,
}

impl OuterLoop {
    fn new(opts: &OuterOptions) -> Result<Self> {
        if !(opts.damping > 0.0 && opts.damping <= 1.0) {
            return Err(Error::InvalidSpec(format!("damping must lie in (0, 1], got {}", opts.damping)));
        }
        Ok(Self {
            tol: opts.tol_rel,
            damping: opts.damping,
            history: Vec::new(),
            prev_diff: f64::INFINITY,
            streak: 0,
        })
    }

    /// Records `w` against `z`, updates `z` and reports whether to stop.
    fn step(&mut self, grid: &Grid, z: &mut SpaceTimeField, w: &SpaceTimeField, secant_max: f64, divergence: fn(usize, f64) -> Error) -> Result<Outer> {
        let diff = h1_norm(grid, &w.sub(z));
        let scale = h1_norm(grid, w);
        if !diff.is_finite() || !scale.is_finite() {
            return Err(Error::NonFiniteBreakdown("outer iteration"));
        }
        let change = if diff == 0.0 { 0.0 } else { diff / scale };
        self.history.push(OuterStep { change, secant_max });
        if change <= self.tol {
            *z = w.clone();
            return Ok(Outer::Done);
        }
        if diff > self.prev_diff {
            self.streak += 1;
            if self.streak >= OUTER_STREAK {
                return Err(divergence(self.streak, diff / self.prev_diff));
            }
        } else {
            self.streak = 0;
        }
        self.prev_diff = diff;
        let step = w.sub(z);
        z.axpy(self.damping, &step);
        Ok(Outer::Continue)
    }

    fn last_change(&self) -> f64 {
        self.history.last().map_or(f64::INFINITY, |s| s.change)
    }
}

fn contraction(streak: usize, ratio: f64) -> Error {
    Error::ContractionFailure { streak, ratio }
}

fn outer_divergence(streak: usize, ratio: f64) -> Error {
    Error::OuterDivergence { streak, ratio }
}

/// Semilinear state under a fixed source, by Picard iteration on the secant form.
pub fn solve_semilinear_state(
    spec: &ProblemSpec,
    nl: &dyn Nonlinearity,
    u0: &[f64],
    source: Option<&SpaceTimeField>,
    opts: &OuterOptions,
) -> Result<SpaceTimeField> {
    spec.validate()?;
    let grid = &spec.grid;
    let f00 = nl.value(0.0, [0.0; 2]);
    let mut src = constant_forcing(grid, f00);
    if let Some(s) = source {
        s.check_grid(grid)?;
        src = Some(match src {
            Some(mut c) => {
                c.axpy(1.0, s);
                c
            }
            None => s.clone(),
        });
    }
    let mut z = SpaceTimeField::zeros(grid);
    let mut outer = OuterLoop::new(opts)?;
    for _ in 0..opts.max_iter {
        let g = eval_secant_coeffs(nl, grid, None, &z)?;
        let prop = Propagator::new(grid, &shifted(&spec.coeffs, &g))?;
        let w = prop.forward(u0, src.as_ref())?;
        if let Outer::Done = outer.step(grid, &mut z, &w, g.max_total(), contraction)? {
            return Ok(z);
        }
    }
    Err(Error::MaxIterations {
        iterations: opts.max_iter,
        last_change: outer.last_change(),
    })
}

/// Frozen linear model whose state carries secant coefficients of `z`
/// around `base` and whose followers carry the linearization at `base + z`.
fn frozen_model(
    spec: &ProblemSpec,
    nl: &dyn Nonlinearity,
    base: Option<&SpaceTimeField>,
    z: &SpaceTimeField,
) -> Result<(LinearModel, f64)> {
    let grid = &spec.grid;
    let secant = eval_secant_coeffs(nl, grid, base, z)?;
    let at = match base {
        Some(b) => b.add(z),
        None => z.clone(),
    };
    let lin = eval_linearization(nl, grid, &at)?;
    let model = LinearModel::with_coefficients(spec, shifted(&spec.coeffs, &secant), shifted(&spec.coeffs, &lin))?;
    Ok((model, secant.max_total()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuasiEquilibrium {
    pub u: SpaceTimeField,
    pub phi: [SpaceTimeField; 2],
    pub v: [SpaceTimeField; 2],
    /// Linear solve at the converged coefficients.
    pub nash: NashSolution,
    pub outer_iterations: usize,
    pub history: Vec<OuterStep>,
}

/// Quasi-equilibrium of the followers for leader `f`.
pub fn solve_quasi_equilibrium(
    spec: &ProblemSpec,
    nl: &dyn Nonlinearity,
    f: &SpaceTimeField,
    opts: &OuterOptions,
) -> Result<QuasiEquilibrium> {
    let grid = &spec.grid;
    f.check_grid(grid)?;
    let mut data = AffineData::from_spec(spec);
    data.forcing = constant_forcing(grid, nl.value(0.0, [0.0; 2]));
    let mut z = SpaceTimeField::zeros(grid);
    let mut outer = OuterLoop::new(opts)?;
    for it in 1..=opts.max_iter {
        let (model, secant_max) = frozen_model(spec, nl, None, &z)?;
        let nash = model.solve_nash(&data, f, &opts.inner)?;
        if let Outer::Done = outer.step(grid, &mut z, &nash.w, secant_max, contraction)? {
            return Ok(QuasiEquilibrium {
                u: nash.w.clone(),
                phi: nash.phi.clone(),
                v: nash.v.clone(),
                nash,
                outer_iterations: it,
                history: outer.history,
            });
        }
    }
    Err(Error::MaxIterations {
        iterations: opts.max_iter,
        last_change: outer.last_change(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NullControlOptions {
    pub eps: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub outer: OuterOptions,
    pub hum: HumSettings,
}

impl Default for NullControlOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            cg_tol: 1e-10,
            cg_max_iter: 500,
            outer: OuterOptions {
                tol_rel: 1e-8,
                max_iter: 30,
                ..OuterOptions::default()
            },
            hum: HumSettings::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SemilinearControl {
    pub hum: HumResult,
    pub ubar: SpaceTimeField,
    pub u: SpaceTimeField,
    /// `||u(T) - ubar(T)||`
    pub mismatch: f64,
    pub outer_iterations: usize,
    pub history: Vec<OuterStep>,
}

/// Leader control driving the semilinear state onto the free trajectory from
/// `spec.ubar0` (zero when absent).
pub fn semilinear_null_control(
    spec: &ProblemSpec,
    nl: &dyn Nonlinearity,
    opts: &NullControlOptions,
) -> Result<SemilinearControl> {
    spec.validate()?;
    let grid = &spec.grid;
    let n = grid.n_interior();
    let ubar0 = spec.ubar0.clone().unwrap_or_else(|| vec![0.0; n]);
    let ubar = solve_semilinear_state(spec, nl, &ubar0, None, &opts.outer)?;
    let data = AffineData {
        w0: spec.u0.iter().zip(&ubar0).map(|(a, b)| a - b).collect(),
        targets: [spec.targets[0].sub(&ubar), spec.targets[1].sub(&ubar)],
        forcing: None,
    };
    let mut z = SpaceTimeField::zeros(grid);
    let mut outer = OuterLoop::new(&opts.outer)?;
    for it in 1..=opts.outer.max_iter {
        let (model, secant_max) = frozen_model(spec, nl, Some(&ubar), &z)?;
        let hum = Hum::new(model, data.clone(), opts.hum.clone())?.minimize(opts.eps, opts.cg_tol, opts.cg_max_iter)?;
        if let Outer::Done = outer.step(grid, &mut z, &hum.nash.w, secant_max, outer_divergence)? {
            let u = hum.nash.w.add(&ubar);
            return Ok(SemilinearControl {
                mismatch: hum.terminal_norm,
                hum,
                ubar,
                u,
                outer_iterations: it,
                history: outer.history,
            });
        }
    }
    Err(Error::MaxIterations {
        iterations: opts.outer.max_iter,
        last_change: outer.last_change(),
    })
}

/// Pointwise second derivatives along `u`; fails for nonlinearities without them.
fn second_fields(nl: &dyn Nonlinearity, grid: &Grid, u: &SpaceTimeField) -> Result<Vec<Vec<SecondDerivatives>>> {
    let g = level_gradients(grid, u);
    (0..=grid.nt())
        .map(|k| {
            (0..grid.n_interior())
                .map(|p| {
                    nl.second(u.level(k)[p], [g[k][0][p], g[k][1][p]])
                        .ok_or_else(|| Error::Unsupported(format!("second derivatives of {}", nl.name())))
                })
                .collect()
        })
        .collect()
}

/// Second-order data at a quasi-equilibrium, reusable across directions.
pub struct SecondOrderContext<'a> {
    spec: &'a ProblemSpec,
    phi: &'a [SpaceTimeField; 2],
    follower: Propagator,
    second: Vec<Vec<SecondDerivatives>>,
}

impl<'a> SecondOrderContext<'a> {
    pub fn new(spec: &'a ProblemSpec, nl: &dyn Nonlinearity, eq: &'a QuasiEquilibrium) -> Result<Self> {
        let grid = &spec.grid;
        eq.u.check_grid(grid)?;
        let second = second_fields(nl, grid, &eq.u)?;
        let lin = eval_linearization(nl, grid, &eq.u)?;
        let follower = Propagator::new(grid, &shifted(&spec.coeffs, &lin))?;
        Ok(Self {
            spec,
            phi: &eq.phi,
            follower,
            second,
        })
    }

    /// `d^2 J_i / d v_i^2 [w, w]`.
    pub fn form(&self, i: usize, w: &SpaceTimeField) -> Result<f64> {
        if i > 1 {
            return Err(Error::InvalidSpec(format!("follower index {i} out of range")));
        }
        let spec = self.spec;
        let grid = &spec.grid;
        w.check_grid(grid)?;
        let n = grid.n_interior();
        let dim = grid.dim();
        let wm = w.masked(&spec.control[i]);
        let h = self.follower.forward(&vec![0.0; n], Some(&wm))?;
        let gh = level_gradients(grid, &h);
        let chi = spec.observe[i].indicator();
        let phi = &self.phi[i];
        let alpha = spec.alpha[i];
        let mut src = SpaceTimeField::zeros(grid);
        for k in 1..=grid.nt() {
            let ph = phi.level(k - 1);
            let hk = h.level(k);
            let sec = &self.second[k];
            let mut flux = vec![vec![0.0; n]; dim];
            let out = src.level_mut(k);
            for p in 0..n {
                let s = &sec[p];
                let dh = [gh[k][0][p], gh[k][1][p]];
                out[p] = s.uu * hk[p] * ph[p] + (s.up[0] * dh[0] + s.up[1] * dh[1]) * ph[p] + alpha * chi[p] * hk[p];
                for (a, fl) in flux.iter_mut().enumerate() {
                    fl[p] = (s.up[a] * hk[p] + s.pp[a][0] * dh[0] + s.pp[a][1] * dh[1]) * ph[p];
                }
            }
            let div = gradient_transpose(grid, &flux);
            for (o, d) in out.iter_mut().zip(div) {
                *o += d;
            }
        }
        let eta = self.follower.adjoint(&vec![0.0; n], Some(&src))?;
        let mask = &spec.control[i];
        let form = inner_st(grid, &wm, &eta, mask, TimeRule::Left)
            + spec.mu[i] * norm_st(grid, &wm, mask, TimeRule::Left).powi(2);
        if !form.is_finite() {
            return Err(Error::NonFiniteBreakdown("second-order form"));
        }
        Ok(form)
    }
}

/// `d^2 J_i / d v_i^2 [w, w]` at a quasi-equilibrium.
pub fn second_order_form(
    spec: &ProblemSpec,
    nl: &dyn Nonlinearity,
    eq: &QuasiEquilibrium,
    i: usize,
    w: &SpaceTimeField,
) -> Result<f64> {
    SecondOrderContext::new(spec, nl, eq)?.form(i, w)
}

/// Random direction supported in `O_i` with unit norm.
pub fn random_direction(grid: &Grid, mask: &SubdomainMask, seed: u64) -> SpaceTimeField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = SpaceTimeField::zeros(grid);
    for v in w.values_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let mut w = w.masked(mask);
    let nrm = norm_st(grid, &w, mask, TimeRule::Left);
    if nrm > 0.0 {
        w.scale(1.0 / nrm);
    }
    w
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FollowerSufficiency {
    pub forms: Vec<f64>,
    pub min_form: f64,
    /// `min (form - mu ||w||^2) / ||w||^2`, the empirical curvature of the state part.
    pub c_hat: f64,
    pub all_positive: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub followers: [FollowerSufficiency; 2],
    pub directions: usize,
    pub sufficiency_verified: bool,
    /// Set when the spatial dimension lies outside the range covered by the theory.
    pub outside_theorem_dimension: bool,
}

/// Evaluates the second-order form along `n_directions` random directions per follower.
pub fn verify_equilibrium_sufficiency(
    spec: &ProblemSpec,
    nl: &dyn Nonlinearity,
    eq: &QuasiEquilibrium,
    n_directions: usize,
    seed: u64,
) -> Result<SufficiencyReport> {
    let ctx = SecondOrderContext::new(spec, nl, eq)?;
    let grid = &spec.grid;
    let mut followers = Vec::with_capacity(2);
    for i in 0..2 {
        let forms = (0..n_directions)
            .into_par_iter()
            .map(|d| {
                let w = random_direction(grid, &spec.control[i], seed + (i * n_directions + d) as u64);
                ctx.form(i, &w)
            })
            .collect::<Result<Vec<f64>>>()?;
        let min_form = forms.iter().copied().fold(f64::INFINITY, f64::min);
        let c_hat = forms.iter().map(|f| f - spec.mu[i]).fold(f64::INFINITY, f64::min);
        followers.push(FollowerSufficiency {
            all_positive: forms.iter().all(|&f| f > 0.0),
            forms,
            min_form,
            c_hat,
        });
    }
    let followers: [FollowerSufficiency; 2] = followers.try_into().expect("two followers");
    Ok(SufficiencyReport {
        sufficiency_verified: n_directions > 0 && followers.iter().all(|f| f.all_positive),
        followers,
        directions: n_directions,
        outside_theorem_dimension: grid.dim() < 2,
    })
}
