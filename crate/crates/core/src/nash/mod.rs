//! Follower Nash equilibrium for a fixed leader control.

mod dense;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::operator_norm;
use crate::mesh::{norm_st, Grid, SpaceTimeField, SubdomainMask, TimeRule};
use crate::operators::{Coefficients, ProblemSpec, Propagator};

pub use dense::{dense_oracle_nash, dense_system_nash, stepped_residual, DENSE_LIMIT};

/// Consecutive growth steps tolerated before declaring non-contraction.
const GROWTH_STREAK: usize = 10;

/// A frozen linear optimality system.
///
/// `state` drives the state forward (and the leader adjoint backward);
/// `follower` drives the follower adjoints backward (and their sensitivities
/// forward). Both coincide for the linear problem.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub grid: Grid,
    pub state_coeffs: Coefficients,
    pub follower_coeffs: Coefficients,
    pub state: Arc<Propagator>,
    pub follower: Arc<Propagator>,
    pub leader: SubdomainMask,
    pub control: [SubdomainMask; 2],
    pub observe: [SubdomainMask; 2],
    pub alpha: [f64; 2],
    pub mu: [f64; 2],
}

impl LinearModel {
    pub fn from_spec(spec: &ProblemSpec) -> Result<Self> {
        spec.validate()?;
        let prop = Arc::new(Propagator::new(&spec.grid, &spec.coeffs)?);
        Ok(Self {
            grid: spec.grid.clone(),
            state_coeffs: spec.coeffs.clone(),
            follower_coeffs: spec.coeffs.clone(),
            state: prop.clone(),
            follower: prop,
            leader: spec.leader.clone(),
            control: spec.control.clone(),
            observe: spec.observe.clone(),
            alpha: spec.alpha,
            mu: spec.mu,
        })
    }

    /// Same geometry and weights as `spec`, with separate coefficient sets.
    pub fn with_coefficients(spec: &ProblemSpec, state: Coefficients, follower: Coefficients) -> Result<Self> {
        spec.validate()?;
        let sp = Arc::new(Propagator::new(&spec.grid, &state)?);
        let fp = if state == follower {
            sp.clone()
        } else {
            Arc::new(Propagator::new(&spec.grid, &follower)?)
        };
        Ok(Self {
            grid: spec.grid.clone(),
            state_coeffs: state,
            follower_coeffs: follower,
            state: sp,
            follower: fp,
            leader: spec.leader.clone(),
            control: spec.control.clone(),
            observe: spec.observe.clone(),
            alpha: spec.alpha,
            mu: spec.mu,
        })
    }

    pub fn with_weights(&self, alpha: [f64; 2], mu: [f64; 2]) -> Self {
        Self {
            alpha,
            mu,
            ..self.clone()
        }
    }

    fn full(&self) -> SubdomainMask {
        SubdomainMask::full(&self.grid)
    }

    /// `A_i v`: state response to `v chi_Oi` with zero initial data.
    pub fn apply_response(&self, i: usize, v: &SpaceTimeField) -> Result<SpaceTimeField> {
        let n = self.grid.n_interior();
        self.state.forward(&vec![0.0; n], Some(&v.masked(&self.control[i])))
    }

    /// `A_i^* g`, the adjoint of [`apply_response`](Self::apply_response).
    pub fn apply_response_adjoint(&self, i: usize, g: &SpaceTimeField) -> Result<SpaceTimeField> {
        let n = self.grid.n_interior();
        Ok(self.state.adjoint(&vec![0.0; n], Some(g))?.masked(&self.control[i]))
    }

    /// Follower adjoint `phi_i` for a given state `w`.
    pub fn follower_adjoint(&self, i: usize, w: &SpaceTimeField, data: &AffineData) -> Result<SpaceTimeField> {
        let n = self.grid.n_interior();
        let mut src = w.sub(&data.targets[i]).masked(&self.observe[i]);
        src.scale(self.alpha[i]);
        self.follower.adjoint(&vec![0.0; n], Some(&src))
    }

    /// `v_i = -phi_i chi_Oi / mu_i`
    pub fn control_from_adjoint(&self, i: usize, phi: &SpaceTimeField) -> SpaceTimeField {
        let mut v = phi.masked(&self.control[i]);
        v.scale(-1.0 / self.mu[i]);
        v
    }

    /// State under leader `f` and followers `v`.
    pub fn state_response(&self, data: &AffineData, f: &SpaceTimeField, v: [&SpaceTimeField; 2]) -> Result<SpaceTimeField> {
        let mut s = f.masked(&self.leader);
        for i in 0..2 {
            s.axpy(1.0, &v[i].masked(&self.control[i]));
        }
        if let Some(forcing) = &data.forcing {
            s.axpy(1.0, forcing);
        }
        self.state.forward(&data.w0, Some(&s))
    }

    /// The equilibrium operator `A(v1, v2)`.
    pub fn apply_a(&self, v: [&SpaceTimeField; 2]) -> Result<[SpaceTimeField; 2]> {
        let mut w = self.apply_response(0, v[0])?;
        w.axpy(1.0, &self.apply_response(1, v[1])?);
        let mut out = Vec::with_capacity(2);
        for i in 0..2 {
            let mut r = self.apply_response_adjoint(i, &w.masked(&self.observe[i]))?;
            r.scale(self.alpha[i]);
            r.axpy(self.mu[i], &v[i].masked(&self.control[i]));
            out.push(r);
        }
        Ok(pair(out))
    }

    /// Right-hand side `B` of the equilibrium equation.
    pub fn compute_rhs(&self, data: &AffineData, f: &SpaceTimeField) -> Result<[SpaceTimeField; 2]> {
        let zero = SpaceTimeField::zeros(&self.grid);
        let z = self.state_response(data, f, [&zero, &zero])?;
        let mut out = Vec::with_capacity(2);
        for i in 0..2 {
            let mut r = self.apply_response_adjoint(i, &data.targets[i].sub(&z).masked(&self.observe[i]))?;
            r.scale(self.alpha[i]);
            out.push(r);
        }
        Ok(pair(out))
    }

    /// Fixed-point iteration `z -> w^z` for the optimality system.
    pub fn solve_nash(&self, data: &AffineData, f: &SpaceTimeField, opts: &NashOptions) -> Result<NashSolution> {
        data.check(&self.grid)?;
        f.check_grid(&self.grid)?;
        if !(opts.damping > 0.0 && opts.damping <= 1.0) {
            return Err(Error::InvalidSpec(format!("damping must lie in (0, 1], got {}", opts.damping)));
        }
        let full = self.full();
        let mut z = SpaceTimeField::zeros(&self.grid);
        let mut history = Vec::new();
        let mut streak = 0;
        let mut prev_change = f64::INFINITY;
        let mut prev_diff = f64::INFINITY;
        for it in 1..=opts.max_iter {
            let (phi0, phi1) = rayon::join(|| self.follower_adjoint(0, &z, data), || self.follower_adjoint(1, &z, data));
            let phi = [phi0?, phi1?];
            let v = [self.control_from_adjoint(0, &phi[0]), self.control_from_adjoint(1, &phi[1])];
            let w = self.state_response(data, f, [&v[0], &v[1]])?;

            let diff = norm_st(&self.grid, &w.sub(&z), &full, TimeRule::Right);
            let scale = norm_st(&self.grid, &w, &full, TimeRule::Right);
            let change = if diff == 0.0 { 0.0 } else { diff / scale };
            if !diff.is_finite() || !scale.is_finite() {
                return Err(Error::NonFiniteBreakdown("nash fixed point"));
            }
            let residuals = if opts.track_residuals {
                Some(self.iteration_residuals(&w, &z, &v)?)
            } else {
                None
            };
            history.push(NashStep { change, residuals });

            if change <= opts.tol_rel {
                let residuals = self.verify_first_order(data, f, &v)?;
                return Ok(NashSolution {
                    w,
                    phi,
                    v,
                    iterations: it,
                    history,
                    residuals,
                });
            }
            // growth is judged on the absolute change: under geometric
            // divergence the relative change levels off
            if diff > prev_diff {
                streak += 1;
                if streak >= GROWTH_STREAK {
                    return Err(Error::ContractionFailure {
                        streak,
                        ratio: diff / prev_diff,
                    });
                }
            } else {
                streak = 0;
            }
            prev_diff = diff;
            prev_change = change;
            if opts.damping == 1.0 {
                z = w;
            } else {
                let step = w.sub(&z);
                z.axpy(opts.damping, &step);
            }
        }
        Err(Error::MaxIterations {
            iterations: opts.max_iter,
            last_change: prev_change,
        })
    }

    /// First-order residuals evaluated along the iteration: with `phi` built
    /// from `z`, the residual reduces to `chi_Oi A_i^*(alpha_i (w - z) chi_Oid)`.
    fn iteration_residuals(&self, w: &SpaceTimeField, z: &SpaceTimeField, v: &[SpaceTimeField; 2]) -> Result<[f64; 2]> {
        let n = self.grid.n_interior();
        let mut out = [0.0; 2];
        for i in 0..2 {
            let mut src = w.sub(z).masked(&self.observe[i]);
            src.scale(self.alpha[i]);
            let r = self.follower.adjoint(&vec![0.0; n], Some(&src))?.masked(&self.control[i]);
            out[i] = relative_residual(&self.grid, &r, &v[i].scaled(self.mu[i]), &self.control[i]);
        }
        Ok(out)
    }

    /// `||alpha_i A_i^*((w - w_id) chi_Oid) + mu_i v_i|| / ||mu_i v_i||` with `w`
    /// recomputed from the supplied controls.
    pub fn verify_first_order(
        &self,
        data: &AffineData,
        f: &SpaceTimeField,
        v: &[SpaceTimeField; 2],
    ) -> Result<[f64; 2]> {
        let w = self.state_response(data, f, [&v[0], &v[1]])?;
        let mut out = [0.0; 2];
        for i in 0..2 {
            let mut r = self.follower_adjoint(i, &w, data)?.masked(&self.control[i]);
            let mv = v[i].scaled(self.mu[i]);
            r.axpy(1.0, &mv);
            out[i] = relative_residual(&self.grid, &r, &mv, &self.control[i]);
        }
        Ok(out)
    }

    /// Richardson iteration `v <- v + omega (B - A v)` on the equilibrium equation.
    pub fn solve_richardson(
        &self,
        data: &AffineData,
        f: &SpaceTimeField,
        omega: f64,
        tol_rel: f64,
        max_iter: usize,
    ) -> Result<[SpaceTimeField; 2]> {
        let rhs = self.compute_rhs(data, f)?;
        let rhs_norm = self.control_norm(&rhs);
        let mut v = [SpaceTimeField::zeros(&self.grid), SpaceTimeField::zeros(&self.grid)];
        if rhs_norm == 0.0 {
            return Ok(v);
        }
        let mut last = f64::INFINITY;
        for _ in 0..max_iter {
            let av = self.apply_a([&v[0], &v[1]])?;
            let r = [rhs[0].sub(&av[0]), rhs[1].sub(&av[1])];
            last = self.control_norm(&r) / rhs_norm;
            if !last.is_finite() {
                return Err(Error::NonFiniteBreakdown("richardson iteration"));
            }
            if last <= tol_rel {
                return Ok(v);
            }
            for i in 0..2 {
                v[i].axpy(omega, &r[i]);
            }
        }
        Err(Error::MaxIterations {
            iterations: max_iter,
            last_change: last,
        })
    }

    fn control_norm(&self, v: &[SpaceTimeField; 2]) -> f64 {
        let a = norm_st(&self.grid, &v[0], &self.control[0], TimeRule::Left);
        let b = norm_st(&self.grid, &v[1], &self.control[1], TimeRule::Left);
        (a * a + b * b).sqrt()
    }

    /// Follower cost `J_i = alpha_i/2 ||w - w_id||^2 + mu_i/2 ||v_i||^2`.
    pub fn follower_cost(&self, data: &AffineData, f: &SpaceTimeField, v: [&SpaceTimeField; 2], i: usize) -> Result<f64> {
        let w = self.state_response(data, f, v)?;
        let track = norm_st(&self.grid, &w.sub(&data.targets[i]), &self.observe[i], TimeRule::Right);
        let effort = norm_st(&self.grid, v[i], &self.control[i], TimeRule::Left);
        Ok(0.5 * self.alpha[i] * track * track + 0.5 * self.mu[i] * effort * effort)
    }

    /// Leader cost `1/2 ||f||^2` over the leader region.
    pub fn leader_cost(&self, f: &SpaceTimeField) -> f64 {
        let n = norm_st(&self.grid, f, &self.leader, TimeRule::Left);
        0.5 * n * n
    }

    /// Norm of the restricted response `chi_obs A_i` by power iteration.
    pub fn restricted_response_norm(&self, i: usize, obs: &SubdomainMask, iters: usize) -> Result<f64> {
        let g = &self.grid;
        let n = g.n_interior();
        let nt = g.nt();
        let len = n * nt;
        let to_field = |x: &[f64], shift: usize| {
            let mut f = SpaceTimeField::zeros(g);
            f.values_mut()[shift * n..shift * n + len].copy_from_slice(x);
            f
        };
        let apply = |x: &[f64]| -> Result<Vec<f64>> {
            let w = self.apply_response(i, &to_field(x, 0))?.masked(obs);
            Ok(w.values()[n..].to_vec())
        };
        let adjoint = |y: &[f64]| -> Result<Vec<f64>> {
            let p = self.apply_response_adjoint(i, &to_field(y, 1).masked(obs))?;
            Ok(p.values()[..len].to_vec())
        };
        Ok(operator_norm(apply, adjoint, len, iters)?.0)
    }

    /// Contraction margin and response norms of the follower game.
    pub fn diagnostics(&self, probe_iters: usize) -> Result<NashDiagnostics> {
        let mut m0 = 0.0_f64;
        for i in 0..2 {
            for obs in [&self.observe[i], &self.observe[1 - i]] {
                m0 = m0.max(self.restricted_response_norm(i, obs, 100)?);
            }
        }
        let max_alpha = self.alpha[0].max(self.alpha[1]);
        let min_mu = self.mu[0].min(self.mu[1]);
        let margin = if max_alpha == 0.0 {
            f64::MAX
        } else {
            4.0 * min_mu / max_alpha - m0 * m0 - 4.0
        };
        Ok(NashDiagnostics {
            m0_estimate: m0,
            coercivity_margin: margin,
            contraction_factor: self.measure_contraction(probe_iters)?,
        })
    }

    /// Growth rate of the homogeneous fixed-point map `z -> w^z - w^0`.
    pub fn measure_contraction(&self, iters: usize) -> Result<f64> {
        let g = &self.grid;
        let full = self.full();
        let zero_data = AffineData::zeros(g);
        let zero = SpaceTimeField::zeros(g);
        let mut z = SpaceTimeField::from_fn(g, |x, t| 1.0 + 0.3 * (7.0 * x[0] + 3.0 * x[1] + t).sin());
        let mut ratio = 0.0;
        for _ in 0..iters.max(1) {
            let zn = norm_st(g, &z, &full, TimeRule::Right);
            if zn == 0.0 {
                return Ok(0.0);
            }
            let phi = [self.follower_adjoint(0, &z, &zero_data)?, self.follower_adjoint(1, &z, &zero_data)?];
            let v = [self.control_from_adjoint(0, &phi[0]), self.control_from_adjoint(1, &phi[1])];
            let w = self.state_response(&zero_data, &zero, [&v[0], &v[1]])?;
            let wn = norm_st(g, &w, &full, TimeRule::Right);
            ratio = wn / zn;
            if wn == 0.0 {
                return Ok(0.0);
            }
            z = w.scaled(1.0 / wn);
        }
        Ok(ratio)
    }
}

fn pair(mut v: Vec<SpaceTimeField>) -> [SpaceTimeField; 2] {
    let b = v.pop().expect("two entries");
    let a = v.pop().expect("two entries");
    [a, b]
}

fn relative_residual(grid: &Grid, r: &SpaceTimeField, reference: &SpaceTimeField, mask: &SubdomainMask) -> f64 {
    let rn = norm_st(grid, r, mask, TimeRule::Left);
    if rn == 0.0 {
        return 0.0;
    }
    // a vanishing reference (first iterate, zero control) reports 1
    rn / norm_st(grid, reference, mask, TimeRule::Left).max(rn)
}

/// Initial state, follower targets and an optional extra state source.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AffineData {
    pub w0: Vec<f64>,
    pub targets: [SpaceTimeField; 2],
    pub forcing: Option<SpaceTimeField>,
}

impl AffineData {
    pub fn from_spec(spec: &ProblemSpec) -> Self {
        Self {
            w0: spec.u0.clone(),
            targets: spec.targets.clone(),
            forcing: None,
        }
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self {
            w0: vec![0.0; grid.n_interior()],
            targets: [SpaceTimeField::zeros(grid), SpaceTimeField::zeros(grid)],
            forcing: None,
        }
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        if self.w0.len() != grid.n_interior() {
            return Err(Error::ShapeMismatch {
                expected: grid.n_interior(),
                found: self.w0.len(),
            });
        }
        for t in self.targets.iter().chain(self.forcing.as_ref()) {
            t.check_grid(grid)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NashOptions {
    pub tol_rel: f64,
    pub max_iter: usize,
    /// Relaxation `z <- z + damping (w - z)`, in `(0, 1]`.
    pub damping: f64,
    pub track_residuals: bool,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            tol_rel: 1e-10,
            max_iter: 200,
            damping: 1.0,
            track_residuals: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NashStep {
    pub change: f64,
    pub residuals: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NashSolution {
    pub w: SpaceTimeField,
    pub phi: [SpaceTimeField; 2],
    pub v: [SpaceTimeField; 2],
    pub iterations: usize,
    pub history: Vec<NashStep>,
    /// First-order residual per follower.
    pub residuals: [f64; 2],
}

impl NashSolution {
    /// Measured ratio of the last two change norms.
    pub fn contraction_ratio(&self) -> Option<f64> {
        let h = &self.history;
        (h.len() >= 2 && h[h.len() - 2].change > 0.0).then(|| h[h.len() - 1].change / h[h.len() - 2].change)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NashDiagnostics {
    pub m0_estimate: f64,
    pub coercivity_margin: f64,
    pub contraction_factor: f64,
}

/// Nash equilibrium of the linear problem for leader `f`.
pub fn solve_nash_fixed_point(spec: &ProblemSpec, f: &SpaceTimeField, tol_rel: f64, max_iter: usize) -> Result<NashSolution> {
    let model = LinearModel::from_spec(spec)?;
    let opts = NashOptions {
        tol_rel,
        max_iter,
        ..NashOptions::default()
    };
    model.solve_nash(&AffineData::from_spec(spec), f, &opts)
}

pub fn diagnostics(spec: &ProblemSpec) -> Result<NashDiagnostics> {
    LinearModel::from_spec(spec)?.diagnostics(30)
}
