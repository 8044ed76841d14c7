//! Carleman weights, the observation weight `theta`, and numerical reports on
//! weighted Carleman and observability inequalities.
//!
//! Exponential weights of realistic size under- and overflow in linear scale,
//! so all weighted integrals are accumulated as log-sum-exp.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hum::solve_coupled_adjoint;
use crate::mesh::{inner_h, Grid, SpaceTimeField, SubdomainMask, TimeRule};
use crate::nash::LinearModel;
use crate::operators::{gradient, gradient_transpose, hessian_norm_sq, laplacian, Coefficients, ProblemSpec, Propagator};

const STEP: f64 = 1e-20;

/// Monotone piecewise-cubic Hermite map with Fritsch–Butland slopes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneMap {
    knots: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

fn secant(x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    (y1 - y0) / (x1 - x0)
}

/// Weighted harmonic mean used at interior knots.
fn interior_slope(h0: f64, d0: f64, h1: f64, d1: f64) -> f64 {
    let (w0, w1) = (2.0 * h1 + h0, h1 + 2.0 * h0);
    (w0 + w1) / (w0 / d0 + w1 / d1)
}

impl MonotoneMap {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let n = knots.len();
        if n < 2 || values.len() != n {
            return Err(Error::InvalidSpec("monotone map needs matching knots and values".into()));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) || values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSpec("monotone map data must be strictly increasing".into()));
        }
        let d: Vec<f64> = (0..n - 1).map(|i| secant(knots[i], values[i], knots[i + 1], values[i + 1])).collect();
        let mut slopes = vec![d[0]; n];
        slopes[n - 1] = d[n - 2];
        for i in 1..n - 1 {
            slopes[i] = interior_slope(knots[i] - knots[i - 1], d[i - 1], knots[i + 1] - knots[i], d[i]);
        }
        Ok(Self { knots, values, slopes })
    }

    fn segment(&self, x: f64) -> usize {
        let last = self.knots.len() - 2;
        self.knots[1..=last].iter().take_while(|&&k| x >= k).count()
    }

    pub fn eval_c(&self, x: Complex64) -> Complex64 {
        let i = self.segment(x.re);
        let h = self.knots[i + 1] - self.knots[i];
        let t = (x - self.knots[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        (t3 * 2.0 - t2 * 3.0 + 1.0) * self.values[i]
            + (t3 - t2 * 2.0 + t) * (h * self.slopes[i])
            + (t2 * 3.0 - t3 * 2.0) * self.values[i + 1]
            + (t3 - t2) * (h * self.slopes[i + 1])
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval_c(Complex64::new(x, 0.0)).re
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.knots[i + 1] - self.knots[i];
        let t = (x - self.knots[i]) / h;
        let t2 = t * t;
        (6.0 * t2 - 6.0 * t) * (self.values[i] - self.values[i + 1]) / h
            + (3.0 * t2 - 4.0 * t + 1.0) * self.slopes[i]
            + (3.0 * t2 - 2.0 * t) * self.slopes[i + 1]
    }
}

/// One-axis factor `m(x) (L - m(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisEta {
    pub length: f64,
    pub map: MonotoneMap,
}

impl AxisEta {
    fn centered(length: f64, c: f64) -> Result<Self> {
        Ok(Self {
            length,
            map: MonotoneMap::new(vec![0.0, c, length], vec![0.0, 0.5 * length, length])?,
        })
    }

    fn eval_c(&self, x: Complex64) -> Complex64 {
        let m = self.map.eval_c(x);
        m * (self.length - m)
    }

    fn value(&self, x: f64) -> f64 {
        self.eval_c(Complex64::new(x, 0.0)).re
    }

    fn derivative(&self, x: f64) -> f64 {
        self.map.derivative(x) * (self.length - 2.0 * self.map.value(x))
    }
}

/// Spatial weight: positive inside, zero on the boundary, with a single
/// interior critical point. In 2D it is the product of axis factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eta {
    pub axes: Vec<AxisEta>,
}

impl Eta {
    pub fn value(&self, x: [f64; 2]) -> f64 {
        self.axes.iter().enumerate().map(|(d, a)| a.value(x[d])).product()
    }

    pub fn eval_c(&self, x: [Complex64; 2]) -> Complex64 {
        self.axes.iter().enumerate().map(|(d, a)| a.eval_c(x[d])).product()
    }

    pub fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for (d, gd) in g.iter_mut().enumerate().take(self.axes.len()) {
            *gd = self
                .axes
                .iter()
                .enumerate()
                .map(|(e, a)| if e == d { a.derivative(x[e]) } else { a.value(x[e]) })
                .product();
        }
        g
    }

    /// `||eta||_inf`, attained at the critical point.
    pub fn max_norm(&self) -> f64 {
        self.axes.iter().map(|a| 0.25 * a.length * a.length).product()
    }

    pub fn sample(&self, grid: &Grid) -> Vec<f64> {
        grid.sample(|x| self.value(x))
    }
}

fn check_center(grid: &Grid, center: &[f64]) -> Result<()> {
    let ok = center.len() == grid.dim() && center.iter().zip(grid.lengths()).all(|(&c, &l)| c > 0.0 && c < l);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidCenter(center.to_vec()))
    }
}

/// Weight whose critical point sits at `center`.
pub fn build_eta(grid: &Grid, center: &[f64]) -> Result<Eta> {
    check_center(grid, center)?;
    let axes = grid
        .lengths()
        .iter()
        .zip(center)
        .map(|(&l, &c)| AxisEta::centered(l, c))
        .collect::<Result<_>>()?;
    Ok(Eta { axes })
}

/// Two weights with critical points at `centers`, identical for
/// `x_0` outside `band` and with the same maximum. In 2D the second
/// axis factor is shared, so agreement holds outside a strip.
pub fn build_eta_pair(grid: &Grid, centers: [&[f64]; 2], band: (f64, f64)) -> Result<[Eta; 2]> {
    for c in centers {
        check_center(grid, c)?;
    }
    let l = grid.lengths()[0];
    let (a, b) = band;
    for c in centers {
        if !(a > 0.0 && a < c[0] && c[0] < b && b < l) {
            return Err(Error::InvalidCenter(c.to_vec()));
        }
    }
    let (c0, c1) = (centers[0][0], centers[1][0]);
    let ma = 0.5 * l * a / c0.max(c1);
    let mb = l - 0.5 * l * (l - b) / (l - c0.min(c1));
    let d_left = ma / a;
    let d_right = (l - mb) / (l - b);
    let slope_a = [c0, c1]
        .iter()
        .map(|&c| interior_slope(a, d_left, c - a, secant(a, ma, c, 0.5 * l)))
        .fold(f64::INFINITY, f64::min);
    let slope_b = [c0, c1]
        .iter()
        .map(|&c| interior_slope(b - c, secant(c, 0.5 * l, b, mb), l - b, d_right))
        .fold(f64::INFINITY, f64::min);
    let others: Vec<AxisEta> = (1..grid.dim())
        .map(|d| AxisEta::centered(grid.lengths()[d], 0.5 * (centers[0][d] + centers[1][d])))
        .collect::<Result<_>>()?;
    let make = |c: f64| -> Eta {
        let slope_c = interior_slope(c - a, secant(a, ma, c, 0.5 * l), b - c, secant(c, 0.5 * l, b, mb));
        let map = MonotoneMap {
            knots: vec![0.0, a, c, b, l],
            values: vec![0.0, ma, 0.5 * l, mb, l],
            slopes: vec![d_left, slope_a, slope_c, slope_b, d_right],
        };
        let mut axes = vec![AxisEta { length: l, map }];
        axes.extend(others.iter().cloned());
        Eta { axes }
    };
    Ok([make(c0), make(c1)])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EtaReport {
    pub interior_positive: bool,
    pub boundary_zero: bool,
    /// Smallest discrete gradient magnitude over interior nodes outside `omega0`.
    pub min_gradient_outside: f64,
}

/// Pointwise scan of the weight on the grid. Corner nodes lie on the
/// boundary, where the product weight has a vanishing gradient, so only
/// interior nodes enter the gradient scan.
pub fn check_eta(grid: &Grid, eta: &Eta, omega0: &SubdomainMask) -> EtaReport {
    let vals = eta.sample(grid);
    let grad = gradient(grid, &vals);
    let min_gradient_outside = (0..vals.len())
        .filter(|&p| !omega0.contains(p))
        .map(|p| grad.iter().map(|g| g[p] * g[p]).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min);
    let mut boundary = Vec::new();
    let lens = grid.lengths();
    for d in 0..grid.dim() {
        let other = (grid.dim() == 2).then(|| 1 - d);
        let ticks: Vec<f64> = match other {
            Some(o) => (0..grid.nx()[o]).map(|j| lens[o] * j as f64 / (grid.nx()[o] - 1) as f64).collect(),
            None => vec![0.0],
        };
        for &side in &[0.0, lens[d]] {
            for &t in &ticks {
                let mut x = [0.0; 2];
                x[d] = side;
                if let Some(o) = other {
                    x[o] = t;
                }
                boundary.push(eta.value(x));
            }
        }
    }
    EtaReport {
        interior_positive: vals.iter().all(|&v| v > 0.0),
        boundary_zero: boundary.iter().all(|&v| v == 0.0),
        min_gradient_outside,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightVariant {
    /// Blows up at both ends of the time interval.
    Sharp,
    /// Frozen at `T/2` on the first half of the interval.
    Ell,
}

impl WeightVariant {
    /// Time profile; `None` where it vanishes.
    pub fn profile(self, t: f64, t_final: f64) -> Option<f64> {
        let v = match self {
            Self::Ell if t <= 0.5 * t_final => 0.5 * t_final,
            _ => (t * (t_final - t)).max(0.0).sqrt(),
        };
        (v > 0.0).then_some(v)
    }

    pub fn profile_dt(self, t: f64, t_final: f64) -> f64 {
        match self {
            Self::Ell if t <= 0.5 * t_final => 0.0,
            _ => (t_final - 2.0 * t) / (2.0 * (t * (t_final - t)).sqrt()),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CarlemanParams {
    pub lambda: f64,
    /// Defaults to `2 (sqrt(T) + T)`.
    pub s: Option<f64>,
}

impl Default for CarlemanParams {
    fn default() -> Self {
        Self { lambda: 2.0, s: None }
    }
}

impl CarlemanParams {
    pub fn s_for(&self, t_final: f64) -> f64 {
        self.s.unwrap_or(2.0 * (t_final.sqrt() + t_final))
    }
}

/// Weights `alpha < 0`, `xi > 0` on every node and level. Levels where the
/// time profile vanishes store `alpha = -inf` and `xi = f64::MAX`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CarlemanWeights {
    pub eta: Eta,
    pub lambda: f64,
    pub s: f64,
    pub t_final: f64,
    pub variant: WeightVariant,
    pub alpha: SpaceTimeField,
    pub xi: SpaceTimeField,
}

pub fn build_weights(grid: &Grid, eta: &Eta, lambda: f64, s: f64, variant: WeightVariant) -> Result<CarlemanWeights> {
    if !(lambda > 0.0 && s > 0.0) {
        return Err(Error::InvalidSpec(format!("Carleman parameters must be positive, got lambda {lambda}, s {s}")));
    }
    let mut w = CarlemanWeights {
        eta: eta.clone(),
        lambda,
        s,
        t_final: grid.t_final(),
        variant,
        alpha: SpaceTimeField::zeros(grid),
        xi: SpaceTimeField::zeros(grid),
    };
    let nodes: Vec<[f64; 2]> = (0..grid.n_interior()).map(|p| grid.coords(p)).collect();
    for k in 0..=grid.nt() {
        let t = grid.time(k);
        for (p, &x) in nodes.iter().enumerate() {
            let (a, xi) = (w.alpha_at(x, t), w.xi_at(x, t));
            w.alpha.level_mut(k)[p] = a;
            w.xi.level_mut(k)[p] = xi;
        }
    }
    Ok(w)
}

impl CarlemanWeights {
    fn big(&self) -> f64 {
        4.0 * self.lambda * self.eta.max_norm()
    }

    fn exponent_c(&self, x: [Complex64; 2]) -> Complex64 {
        ((self.eta.eval_c(x) + 2.0 * self.eta.max_norm()) * self.lambda).exp()
    }

    pub fn alpha_c(&self, x: [Complex64; 2], t: f64) -> Option<Complex64> {
        let l = self.variant.profile(t, self.t_final)?;
        Some((self.exponent_c(x) - self.big().exp()) / l)
    }

    pub fn xi_c(&self, x: [Complex64; 2], t: f64) -> Option<Complex64> {
        let l = self.variant.profile(t, self.t_final)?;
        Some(self.exponent_c(x) / l)
    }

    fn real(x: [f64; 2]) -> [Complex64; 2] {
        [Complex64::new(x[0], 0.0), Complex64::new(x[1], 0.0)]
    }

    pub fn alpha_at(&self, x: [f64; 2], t: f64) -> f64 {
        self.alpha_c(Self::real(x), t).map_or(f64::NEG_INFINITY, |v| v.re)
    }

    pub fn xi_at(&self, x: [f64; 2], t: f64) -> f64 {
        self.xi_c(Self::real(x), t).map_or(f64::MAX, |v| v.re)
    }

    /// `(alpha_t, xi_t)` from the closed forms.
    pub fn time_derivatives(&self, x: [f64; 2], t: f64) -> Option<(f64, f64)> {
        let l = self.variant.profile(t, self.t_final)?;
        let dl = self.variant.profile_dt(t, self.t_final);
        let e = self.exponent_c(Self::real(x)).re;
        let c = -dl / (l * l);
        Some(((e - self.big().exp()) * c, e * c))
    }

    /// `ln(xi^p e^{q s alpha})` at node `p`, level `k`.
    pub fn log_factor(&self, k: usize, node: usize, xi_pow: f64, alpha_mult: f64) -> f64 {
        let a = self.alpha.level(k)[node];
        if a == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        xi_pow * self.xi.level(k)[node].ln() + alpha_mult * self.s * a
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightReport {
    pub samples: usize,
    pub gradient_max_rel_error: f64,
    pub gradient_identity: bool,
    pub xi_inverse_bound: bool,
    /// Largest `(|alpha_t| + |xi_t|) / xi^3` seen.
    pub time_ratio_max: f64,
    pub time_bound_stated: bool,
    pub time_bound_relaxed: bool,
}

/// Checks the spatial gradient identity (complex-step derivatives of the
/// closed forms against `lambda xi grad eta`), the bound on `1/xi` and the
/// time-derivative bounds at random points, plus `1/xi` on every grid node.
pub fn check_weight_properties(grid: &Grid, w: &CarlemanWeights, samples: usize, seed: u64) -> WeightReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_final = w.t_final;
    let mut max_err: f64 = 0.0;
    let mut xi_ok = true;
    let mut ratio_max: f64 = 0.0;
    for _ in 0..samples {
        let mut x = [0.0; 2];
        for (d, xd) in x.iter_mut().enumerate().take(grid.dim()) {
            *xd = rng.random_range(0.0..grid.lengths()[d]);
        }
        let t = rng.random_range(0.0..t_final);
        let Some(xi) = w.xi_c(CarlemanWeights::real(x), t).map(|v| v.re) else {
            continue;
        };
        let ge = w.eta.gradient(x);
        for d in 0..grid.dim() {
            let mut xc = CarlemanWeights::real(x);
            xc[d].im = STEP;
            let ga = w.alpha_c(xc, t).map_or(0.0, |v| v.im / STEP);
            let gx = w.xi_c(xc, t).map_or(0.0, |v| v.im / STEP);
            let expect = w.lambda * xi * ge[d];
            let scale = expect.abs().max(f64::MIN_POSITIVE);
            max_err = max_err.max((ga - expect).abs() / scale).max((gx - expect).abs() / scale);
        }
        xi_ok &= 1.0 / xi <= 0.5 * t_final;
        if let Some((at, xt)) = w.time_derivatives(x, t) {
            ratio_max = ratio_max.max((at.abs() + xt.abs()) / xi.powi(3));
        }
    }
    for k in 0..=grid.nt() {
        if w.variant.profile(grid.time(k), t_final).is_some() {
            xi_ok &= w.xi.level(k).iter().all(|&xi| 1.0 / xi <= 0.5 * t_final);
        }
    }
    WeightReport {
        samples,
        gradient_max_rel_error: max_err,
        gradient_identity: max_err <= 1e-12,
        xi_inverse_bound: xi_ok,
        time_ratio_max: ratio_max,
        time_bound_stated: ratio_max <= 0.5 * t_final,
        time_bound_relaxed: ratio_max <= t_final,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetCase {
    /// Both followers observe the same region and track the same target.
    Shared,
    /// The observation regions meet the leader region differently.
    Distinct,
}

/// Observation weight `theta` (minimum over the weight family in the
/// distinct case), kept in log form alongside the linear values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Theta {
    pub case: TargetCase,
    pub log_theta: SpaceTimeField,
    pub theta: SpaceTimeField,
}

pub fn build_theta(weights: &[CarlemanWeights], case: TargetCase) -> Result<Theta> {
    let expected = match case {
        TargetCase::Shared => 1,
        TargetCase::Distinct => 2,
    };
    if weights.len() != expected {
        return Err(Error::CaseMismatch(format!("{case:?} case takes {expected} weight families, got {}", weights.len())));
    }
    if weights.iter().any(|w| w.variant != WeightVariant::Ell) {
        return Err(Error::InvalidSpec("theta is built from the frozen-start weights".into()));
    }
    let mut log_theta = weights[0].alpha.clone();
    let (n, nt) = (log_theta.n_space(), log_theta.nt());
    for k in 0..=nt {
        for p in 0..n {
            log_theta.level_mut(k)[p] = weights.iter().map(|w| w.log_factor(k, p, 3.0, 1.0)).fold(f64::INFINITY, f64::min);
        }
    }
    let mut theta = log_theta.clone();
    theta.values_mut().iter_mut().for_each(|v| *v = v.exp());
    Ok(Theta { case, log_theta, theta })
}

/// Which case the geometry of `spec` supports, if any.
pub fn classify_case(spec: &ProblemSpec) -> Result<TargetCase> {
    let shared_region = spec.observe[0] == spec.observe[1];
    let same_target = spec.targets[0].values() == spec.targets[1].values();
    if shared_region && same_target {
        return Ok(TargetCase::Shared);
    }
    let meet = |i: usize| spec.observe[i].intersection(&spec.leader);
    if meet(0) != meet(1) {
        return Ok(TargetCase::Distinct);
    }
    Err(Error::CaseMismatch(
        "observation regions coincide on the leader region but the targets differ".into(),
    ))
}

/// Weights, `theta` and the observation region built from the geometry of a problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CarlemanSetup {
    pub case: TargetCase,
    /// Region around the critical points where the weighted observation acts.
    pub omega: SubdomainMask,
    pub sharp: CarlemanWeights,
    pub ell: Vec<CarlemanWeights>,
    pub theta: Theta,
}

pub fn carleman_setup(spec: &ProblemSpec, params: &CarlemanParams, case: Option<TargetCase>) -> Result<CarlemanSetup> {
    let g = &spec.grid;
    let found = classify_case(spec);
    let case = match (case, found) {
        (None, found) => found?,
        (Some(c), Ok(f)) if c == f => c,
        (Some(c), _) => return Err(Error::CaseMismatch(format!("geometry does not support the {c:?} case"))),
    };
    let s = params.s_for(g.t_final());
    let meet = |i: usize| spec.observe[i].intersection(&spec.leader);
    let center = |m: &SubdomainMask| -> Result<Vec<f64>> {
        let c = m
            .centroid(g)
            .ok_or_else(|| Error::InvalidSpec("observation region misses the leader region".into()))?;
        Ok(c[..g.dim()].to_vec())
    };
    let etas = match case {
        TargetCase::Shared => vec![build_eta(g, &center(&meet(0))?)?],
        TargetCase::Distinct => {
            let hull = spec.leader.hull(g).ok_or(Error::EmptyMask)?;
            let half = 0.5 * g.h()[0];
            let band = (hull[0].0 - half, hull[0].1 + half);
            let (c0, c1) = (center(&meet(0))?, center(&meet(1))?);
            build_eta_pair(g, [&c0, &c1], band)?.to_vec()
        }
    };
    let omega = match case {
        TargetCase::Shared => meet(0),
        TargetCase::Distinct => meet(0).union(&meet(1)),
    };
    if omega.is_empty() {
        return Err(Error::EmptyMask);
    }
    let ell = etas
        .iter()
        .map(|e| build_weights(g, e, params.lambda, s, WeightVariant::Ell))
        .collect::<Result<Vec<_>>>()?;
    let theta = build_theta(&ell, case)?;
    Ok(CarlemanSetup {
        case,
        omega,
        sharp: build_weights(g, &etas[0], params.lambda, s, WeightVariant::Sharp)?,
        ell,
        theta,
    })
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = terms.filter(|t| *t > f64::NEG_INFINITY).collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn ln_sq(v: f64) -> f64 {
    (v * v).ln()
}

/// Right-hand side of the backward problem in a Carleman sample.
#[derive(Clone, Debug)]
pub enum CarlemanSource {
    /// Plain source `g`.
    Plain(SpaceTimeField),
    /// Divergence source `div F1`, one field per axis.
    Divergence(Vec<SpaceTimeField>),
}

/// Both sides of the weighted inequality as natural logarithms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarlemanSample {
    pub log_lhs: f64,
    pub log_rhs: f64,
    pub ratio: f64,
}

/// `LHS / RHS` of the weighted inequality for the solution `z` of
/// `-z_t + bilaplacian z = g`, `z(T) = z0`. `None` when `z` vanishes.
pub fn carleman_ratio(
    prop: &Propagator,
    w: &CarlemanWeights,
    omega: &SubdomainMask,
    z0: &[f64],
    source: &CarlemanSource,
) -> Result<Option<f64>> {
    Ok(carleman_sample(prop, w, omega, z0, source)?.map(|c| c.ratio))
}

pub fn carleman_sample(
    prop: &Propagator,
    w: &CarlemanWeights,
    omega: &SubdomainMask,
    z0: &[f64],
    source: &CarlemanSource,
) -> Result<Option<CarlemanSample>> {
    let g = prop.grid();
    let nt = g.nt();
    let (l, s) = (w.lambda, w.s);
    let g_field = match source {
        CarlemanSource::Plain(f) => f.clone(),
        CarlemanSource::Divergence(f1) => {
            let mut out = SpaceTimeField::zeros(g);
            for k in 0..=nt {
                let comps: Vec<Vec<f64>> = f1.iter().map(|c| c.level(k).to_vec()).collect();
                let div = gradient_transpose(g, &comps);
                out.level_mut(k).iter_mut().zip(div).for_each(|(o, d)| *o = -d);
            }
            out
        }
    };
    let z = prop.adjoint(z0, Some(&g_field))?;
    let base = (g.cell_volume() * g.dt()).ln();
    let mut lhs = Vec::new();
    let mut rhs = Vec::new();
    for k in 0..=nt {
        let q = base + TimeRule::Trapezoid.weight(k, nt).ln();
        let zk = z.level(k);
        let grad = gradient(g, zk);
        let lap = laplacian(g, zk);
        let hess = hessian_norm_sq(g, zk);
        let grad_lap = gradient(g, &lap);
        for p in 0..zk.len() {
            let lf = |pow: f64| q + w.log_factor(k, p, pow, 2.0);
            let gz: f64 = grad.iter().map(|c| c[p] * c[p]).sum();
            let gl: f64 = grad_lap.iter().map(|c| c[p] * c[p]).sum();
            lhs.push(lf(6.0) + (s.powi(6) * l.powi(8)).ln() + ln_sq(zk[p]));
            lhs.push(lf(4.0) + (s.powi(4) * l.powi(6)).ln() + gz.ln());
            lhs.push(lf(3.0) + (s.powi(3) * l.powi(4)).ln() + ln_sq(lap[p]));
            lhs.push(lf(2.0) + (s.powi(2) * l.powi(4)).ln() + hess[p].ln());
            lhs.push(lf(1.0) + (s * l * l).ln() + gl.ln());
            if omega.contains(p) {
                rhs.push(lf(7.0) + (s.powi(7) * l.powi(8)).ln() + ln_sq(zk[p]));
            }
            match source {
                CarlemanSource::Plain(f) => rhs.push(lf(0.0) + ln_sq(f.level(k)[p])),
                CarlemanSource::Divergence(f1) => {
                    let m: f64 = f1.iter().map(|c| c.level(k)[p].powi(2)).sum();
                    rhs.push(lf(2.0) + (s * s * l * l).ln() + m.ln());
                }
            }
        }
    }
    let (a, b) = (log_sum_exp(lhs.into_iter()), log_sum_exp(rhs.into_iter()));
    if a == f64::NEG_INFINITY {
        return Ok(None);
    }
    Ok(Some(CarlemanSample {
        log_lhs: a,
        log_rhs: b,
        ratio: (a - b).exp(),
    }))
}

/// Summary statistics of a family of sampled ratios.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatioStats {
    pub count: usize,
    pub max: f64,
    pub median: f64,
    pub min: f64,
}

impl RatioStats {
    pub fn from_values(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        let median = match v.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => v[n / 2],
            n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        };
        Self {
            count: values.len(),
            max: v.last().copied().unwrap_or(f64::NAN),
            median,
            min: v.first().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CarlemanReport {
    pub ratios: Vec<f64>,
    /// Accepted samples as `(sample index, logs and ratio)`.
    pub samples: Vec<(usize, CarlemanSample)>,
    pub stats: RatioStats,
    /// Samples rejected because `z` vanished.
    pub skipped: usize,
    pub all_finite_positive: bool,
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_field(rng: &mut ChaCha8Rng, g: &Grid) -> SpaceTimeField {
    let mut f = SpaceTimeField::zeros(g);
    f.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    f
}

/// Ratios for random `(z0, g)`; sample `i` is seeded with `seed + i`.
pub fn carleman_ratio_report(
    grid: &Grid,
    w: &CarlemanWeights,
    omega: &SubdomainMask,
    samples: usize,
    seed: u64,
    divergence: bool,
) -> Result<CarlemanReport> {
    let prop = Propagator::new(grid, &Coefficients::zeros(grid))?;
    let out: Vec<Option<CarlemanSample>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let z0 = random_vec(&mut rng, grid.n_interior());
            let src = if divergence {
                CarlemanSource::Divergence((0..grid.dim()).map(|_| random_field(&mut rng, grid)).collect())
            } else {
                CarlemanSource::Plain(random_field(&mut rng, grid))
            };
            carleman_sample(&prop, w, omega, &z0, &src)
        })
        .collect::<Result<_>>()?;
    let skipped = out.iter().filter(|r| r.is_none()).count();
    let samples: Vec<(usize, CarlemanSample)> =
        out.into_iter().enumerate().filter_map(|(i, r)| r.map(|r| (i, r))).collect();
    let ratios: Vec<f64> = samples.iter().map(|s| s.1.ratio).collect();
    Ok(CarlemanReport {
        stats: RatioStats::from_values(&ratios),
        all_finite_positive: ratios.iter().all(|r| r.is_finite() && *r > 0.0),
        ratios,
        samples,
        skipped,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub ratios: Vec<f64>,
    pub denominators: Vec<f64>,
    pub stats: RatioStats,
    /// Draws discarded because the terminal datum was identically zero.
    pub resampled: usize,
    pub all_finite: bool,
    pub denominators_positive: bool,
}

/// Observability ratio for one terminal datum: returns `(ratio, denominator)`.
pub fn observability_ratio(model: &LinearModel, theta: &Theta, psi0: &[f64], tol: f64, max_iter: usize) -> Result<(f64, f64)> {
    let g = &model.grid;
    let st = solve_coupled_adjoint(model, psi0, tol, max_iter)?;
    let nt = g.nt();
    let scale = g.cell_volume() * g.dt();
    let mut weighted = 0.0;
    let mut denom = 0.0;
    for k in 0..=nt {
        let c = TimeRule::Trapezoid.weight(k, nt) * scale;
        let (psi, lt) = (st.psi.level(k), theta.log_theta.level(k));
        let (e1, e2) = (st.eta[0].level(k), st.eta[1].level(k));
        for p in 0..psi.len() {
            if model.leader.contains(p) {
                denom += c * psi[p] * psi[p];
            }
            let obs_sq = match theta.case {
                TargetCase::Shared if model.observe[0].contains(p) => {
                    (model.alpha[0] * e1[p] + model.alpha[1] * e2[p]).powi(2)
                }
                TargetCase::Shared => 0.0,
                TargetCase::Distinct => {
                    let a = if model.observe[0].contains(p) { e1[p] * e1[p] } else { 0.0 };
                    let b = if model.observe[1].contains(p) { e2[p] * e2[p] } else { 0.0 };
                    a + b
                }
            };
            if obs_sq > 0.0 {
                weighted += c * (2.0 * lt[p] + obs_sq.ln()).exp();
            }
        }
    }
    let init = inner_h(g, st.psi.level(0), st.psi.level(0));
    Ok(((init + weighted) / denom, denom))
}

/// Ratios for random terminal data; sample `i` is seeded with `seed + i`.
pub fn estimate_observability(model: &LinearModel, theta: &Theta, samples: usize, seed: u64) -> Result<ObservabilityReport> {
    theta.log_theta.check_grid(&model.grid)?;
    let n = model.grid.n_interior();
    let out: Vec<(f64, f64, usize)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut resampled = 0;
            let psi0 = loop {
                let v = random_vec(&mut rng, n);
                if v.iter().any(|&x| x != 0.0) {
                    break v;
                }
                resampled += 1;
            };
            let (r, d) = observability_ratio(model, theta, &psi0, 1e-12, 500)?;
            Ok((r, d, resampled))
        })
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = out.iter().map(|o| o.0).collect();
    let denominators: Vec<f64> = out.iter().map(|o| o.1).collect();
    Ok(ObservabilityReport {
        stats: RatioStats::from_values(&ratios),
        all_finite: ratios.iter().all(|r| r.is_finite()),
        denominators_positive: denominators.iter().all(|d| *d > 0.0),
        resampled: out.iter().map(|o| o.2).sum(),
        ratios,
        denominators,
    })
}
