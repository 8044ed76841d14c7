//! Leader control by penalized HUM on the coupled adjoint system.

mod dense;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::conjugate_gradient;
use crate::mesh::{inner_h, inner_st, norm_h, norm_st, Grid, SpaceTimeField, SubdomainMask, TimeRule};
use crate::nash::{AffineData, LinearModel, NashOptions, NashSolution};
use crate::operators::ProblemSpec;

pub use dense::dense_coupled_adjoint;

const GROWTH_STREAK: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMode {
    /// `eps/2 ||psi0||^2`
    Quadratic,
    /// `eps ||psi0||`
    ExactNorm,
}

/// Solution `(psi, eta_1, eta_2)` of the coupled adjoint system.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoupledAdjointState {
    pub psi: SpaceTimeField,
    pub eta: [SpaceTimeField; 2],
    pub iterations: usize,
}

/// Sweeps `psi <- adjoint(psi0, sum alpha_i eta_i chi_Oid)`, then
/// `eta_i <- forward(0, -psi chi_Oi / mu_i)`, until `psi` settles.
pub fn solve_coupled_adjoint(model: &LinearModel, psi0: &[f64], tol_rel: f64, max_iter: usize) -> Result<CoupledAdjointState> {
    let g = &model.grid;
    let n = g.n_interior();
    if psi0.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            found: psi0.len(),
        });
    }
    if psi0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteBreakdown("terminal adjoint datum"));
    }
    let full = SubdomainMask::full(g);
    let zero = vec![0.0; n];
    let mut eta = [SpaceTimeField::zeros(g), SpaceTimeField::zeros(g)];
    let mut psi = SpaceTimeField::zeros(g);
    let mut streak = 0;
    let mut prev_diff = f64::INFINITY;
    let mut last = f64::INFINITY;
    for it in 1..=max_iter {
        let mut src = SpaceTimeField::zeros(g);
        for i in 0..2 {
            src.axpy(model.alpha[i], &eta[i].masked(&model.observe[i]));
        }
        let next = model.state.adjoint(psi0, Some(&src))?;
        let sweep = |i: usize| -> Result<SpaceTimeField> {
            let mut s = next.masked(&model.control[i]);
            s.scale(-1.0 / model.mu[i]);
            model.follower.forward(&zero, Some(&s))
        };
        let (e0, e1) = rayon::join(|| sweep(0), || sweep(1));
        eta = [e0?, e1?];

        let diff = norm_st(g, &next.sub(&psi), &full, TimeRule::Left);
        let scale = norm_st(g, &next, &full, TimeRule::Left);
        psi = next;
        last = if diff == 0.0 { 0.0 } else { diff / scale };
        if last <= tol_rel {
            return Ok(CoupledAdjointState {
                psi,
                eta,
                iterations: it,
            });
        }
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
    }
    Err(Error::MaxIterations {
        iterations: max_iter,
        last_change: last,
    })
}

/// Inner solver settings shared by every evaluation of `G_eps`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HumSettings {
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub damping: f64,
}

impl Default for HumSettings {
    fn default() -> Self {
        Self {
            inner_tol: 1e-13,
            inner_max_iter: 500,
            damping: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HumResult {
    pub psi0: Vec<f64>,
    /// Leader control `psi chi_O`.
    pub f: SpaceTimeField,
    pub nash: NashSolution,
    pub terminal_norm: f64,
    pub f_norm: f64,
    pub leader_cost: f64,
    /// Relative CG residuals, starting at 1.
    pub cg_residuals: Vec<f64>,
    /// CG quadratic objective along the iterates; nonincreasing.
    pub cg_objective: Vec<f64>,
    pub cg_iterations: usize,
    pub eps: f64,
    /// Penalty actually used by the quadratic solve (differs from `eps` in exact-norm mode).
    pub eps_effective: f64,
    pub mode: PenaltyMode,
}

/// Penalized HUM functional `G_eps` for a frozen linear system.
#[derive(Clone, Debug)]
pub struct Hum {
    pub model: LinearModel,
    pub data: AffineData,
    pub settings: HumSettings,
    zero: AffineData,
}

impl Hum {
    pub fn new(model: LinearModel, data: AffineData, settings: HumSettings) -> Result<Self> {
        data.check(&model.grid)?;
        let zero = AffineData::zeros(&model.grid);
        Ok(Self {
            model,
            data,
            settings,
            zero,
        })
    }

    pub fn from_spec(spec: &ProblemSpec) -> Result<Self> {
        Self::new(LinearModel::from_spec(spec)?, AffineData::from_spec(spec), HumSettings::default())
    }

    pub fn grid(&self) -> &Grid {
        &self.model.grid
    }

    fn nash_options(&self, tol: f64) -> NashOptions {
        NashOptions {
            tol_rel: tol,
            max_iter: self.settings.inner_max_iter,
            damping: self.settings.damping,
            track_residuals: false,
        }
    }

    pub fn coupled_adjoint(&self, psi0: &[f64]) -> Result<CoupledAdjointState> {
        solve_coupled_adjoint(&self.model, psi0, self.settings.inner_tol, self.settings.inner_max_iter)
    }

    pub fn eval_g(&self, psi0: &[f64], eps: f64, mode: PenaltyMode) -> Result<f64> {
        self.eval_g_with(&self.data, psi0, eps, mode)
    }

    /// `G_eps` with the affine terms removed.
    pub fn eval_g_homogeneous(&self, psi0: &[f64], eps: f64, mode: PenaltyMode) -> Result<f64> {
        self.eval_g_with(&self.zero, psi0, eps, mode)
    }

    fn eval_g_with(&self, data: &AffineData, psi0: &[f64], eps: f64, mode: PenaltyMode) -> Result<f64> {
        let g = self.grid();
        let st = self.coupled_adjoint(psi0)?;
        let obs = norm_st(g, &st.psi, &self.model.leader, TimeRule::Left);
        let mut value = 0.5 * obs * obs + inner_h(g, &data.w0, st.psi.level(0));
        if let Some(forcing) = &data.forcing {
            value += inner_st(g, &st.psi, forcing, &SubdomainMask::full(g), TimeRule::Left);
        }
        for i in 0..2 {
            value -= self.model.alpha[i] * inner_st(g, &st.eta[i], &data.targets[i], &self.model.observe[i], TimeRule::Right);
        }
        let pn = norm_h(g, psi0);
        value += match mode {
            PenaltyMode::Quadratic => 0.5 * eps * pn * pn,
            PenaltyMode::ExactNorm => eps * pn,
        };
        Ok(value)
    }

    /// Nash equilibrium under leader `psi chi_O` and its terminal state.
    fn controlled(&self, data: &AffineData, psi0: &[f64], tol: f64) -> Result<(SpaceTimeField, NashSolution)> {
        let st = solve_coupled_adjoint(&self.model, psi0, tol, self.settings.inner_max_iter)?;
        let f = st.psi.masked(&self.model.leader);
        let nash = self.model.solve_nash(data, &f, &self.nash_options(tol))?;
        Ok((f, nash))
    }

    pub fn grad_g(&self, psi0: &[f64], eps: f64, mode: PenaltyMode) -> Result<Vec<f64>> {
        let g = self.grid();
        let pn = norm_h(g, psi0);
        let coef = match mode {
            PenaltyMode::Quadratic => eps,
            PenaltyMode::ExactNorm if pn == 0.0 => return Err(Error::ZeroPointNonsmooth),
            PenaltyMode::ExactNorm => eps / pn,
        };
        let (_, nash) = self.controlled(&self.data, psi0, self.settings.inner_tol)?;
        let mut grad = nash.w.level(g.nt()).to_vec();
        grad.iter_mut().zip(psi0).for_each(|(x, p)| *x += coef * p);
        Ok(grad)
    }

    /// The HUM Gramian `Lambda psi0`: terminal state under zero affine data.
    pub fn apply_lambda(&self, psi0: &[f64]) -> Result<Vec<f64>> {
        self.apply_lambda_tol(psi0, self.settings.inner_tol)
    }

    fn apply_lambda_tol(&self, psi0: &[f64], tol: f64) -> Result<Vec<f64>> {
        let (_, nash) = self.controlled(&self.zero, psi0, tol)?;
        Ok(nash.w.level(self.grid().nt()).to_vec())
    }

    /// Terminal state without leader control.
    pub fn free_terminal(&self, tol: f64) -> Result<Vec<f64>> {
        let n = self.grid().n_interior();
        let (_, nash) = self.controlled(&self.data, &vec![0.0; n], tol)?;
        Ok(nash.w.level(self.grid().nt()).to_vec())
    }

    /// Solves `(Lambda + eps I) psi0 = -b` by conjugate gradient.
    pub fn minimize(&self, eps: f64, cg_tol: f64, max_iter: usize) -> Result<HumResult> {
        if !(eps > 0.0) {
            return Err(Error::InvalidSpec(format!("penalty must be positive, got {eps}")));
        }
        let tol = self.settings.inner_tol.min(cg_tol / 10.0);
        let b = self.free_terminal(tol)?;
        self.minimize_with_rhs(&b, eps, cg_tol, max_iter, tol, PenaltyMode::Quadratic, eps)
    }

    #[allow(clippy::too_many_arguments)]
    fn minimize_with_rhs(
        &self,
        b: &[f64],
        eps: f64,
        cg_tol: f64,
        max_iter: usize,
        tol: f64,
        mode: PenaltyMode,
        reported_eps: f64,
    ) -> Result<HumResult> {
        let neg_b: Vec<f64> = b.iter().map(|v| -v).collect();
        let out = conjugate_gradient(
            |p| {
                let mut y = self.apply_lambda_tol(p, tol)?;
                y.iter_mut().zip(p).for_each(|(a, x)| *a += eps * x);
                Ok(y)
            },
            &neg_b,
            cg_tol,
            max_iter,
        )?;
        self.finish(out.x, out.residual_history, out.objective_history, out.iterations, reported_eps, eps, mode, tol)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        psi0: Vec<f64>,
        cg_residuals: Vec<f64>,
        cg_objective: Vec<f64>,
        cg_iterations: usize,
        eps: f64,
        eps_effective: f64,
        mode: PenaltyMode,
        tol: f64,
    ) -> Result<HumResult> {
        let g = self.grid();
        let (f, nash) = self.controlled(&self.data, &psi0, tol)?;
        let terminal_norm = norm_h(g, nash.w.level(g.nt()));
        let f_norm = norm_st(g, &f, &self.model.leader, TimeRule::Left);
        Ok(HumResult {
            psi0,
            leader_cost: self.model.leader_cost(&f),
            f,
            nash,
            terminal_norm,
            f_norm,
            cg_residuals,
            cg_objective,
            cg_iterations,
            eps,
            eps_effective,
            mode,
        })
    }

    /// Minimizer of the exact-norm functional.
    ///
    /// Its optimality condition is the quadratic one with penalty
    /// `eps / ||psi0||`, whose terminal norm equals `eps`; that penalty is
    /// located by bisection in log scale. `psi0 = 0` is optimal when the free
    /// terminal state already has norm at most `eps`.
    pub fn minimize_exact_norm(&self, eps: f64, cg_tol: f64, max_iter: usize) -> Result<HumResult> {
        if !(eps > 0.0) {
            return Err(Error::InvalidSpec(format!("penalty must be positive, got {eps}")));
        }
        let g = self.grid();
        let tol = self.settings.inner_tol.min(cg_tol / 10.0);
        let b = self.free_terminal(tol)?;
        if norm_h(g, &b) <= eps {
            let n = g.n_interior();
            return self.finish(vec![0.0; n], vec![0.0], vec![0.0], 0, eps, f64::INFINITY, PenaltyMode::ExactNorm, tol);
        }
        let solve = |e: f64| self.minimize_with_rhs(&b, e, cg_tol, max_iter, tol, PenaltyMode::ExactNorm, eps);
        let (mut lo, mut hi) = (-14.0_f64, 6.0_f64);
        let mut best = solve(10f64.powf(lo))?;
        if best.terminal_norm >= eps {
            return Ok(best);
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let r = solve(10f64.powf(mid))?;
            let ratio = r.terminal_norm / eps;
            if ratio <= 1.0 {
                lo = mid;
                best = r;
            } else {
                hi = mid;
            }
            if (ratio - 1.0).abs() <= 1e-6 || hi - lo < 1e-12 {
                break;
            }
        }
        Ok(best)
    }

    /// Independent penalties solved in parallel, returned in input order.
    pub fn sweep(&self, eps: &[f64], cg_tol: f64, max_iter: usize) -> Result<Vec<HumResult>> {
        eps.par_iter().map(|&e| self.minimize(e, cg_tol, max_iter)).collect()
    }
}

/// Quadratic-mode minimizer of `G_eps` for the linear problem.
pub fn minimize_g(spec: &ProblemSpec, eps: f64, cg_tol: f64, max_iter: usize) -> Result<HumResult> {
    Hum::from_spec(spec)?.minimize(eps, cg_tol, max_iter)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub hum: HumResult,
    pub ubar: SpaceTimeField,
    pub u: SpaceTimeField,
    /// `||u(T) - ubar(T)||`, read off the shifted state.
    pub mismatch: f64,
}

/// Free trajectory from `ubar0` (no controls).
pub fn free_trajectory(spec: &ProblemSpec, ubar0: &[f64]) -> Result<SpaceTimeField> {
    LinearModel::from_spec(spec)?.state.forward(ubar0, None)
}

/// Drives `u` to the free trajectory through `w = u - ubar`.
pub fn control_to_trajectory(spec: &ProblemSpec, eps: f64, cg_tol: f64, max_iter: usize) -> Result<TrajectoryResult> {
    let ubar0 = spec
        .ubar0
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("trajectory data ubar0 is missing".into()))?;
    let model = LinearModel::from_spec(spec)?;
    let ubar = model.state.forward(ubar0, None)?;
    let data = AffineData {
        w0: spec.u0.iter().zip(ubar0).map(|(a, b)| a - b).collect(),
        targets: [spec.targets[0].sub(&ubar), spec.targets[1].sub(&ubar)],
        forcing: None,
    };
    let hum = Hum::new(model, data, HumSettings::default())?.minimize(eps, cg_tol, max_iter)?;
    let u = hum.nash.w.add(&ubar);
    let mismatch = hum.terminal_norm;
    Ok(TrajectoryResult { hum, ubar, u, mismatch })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetCondition {
    pub integrals: [f64; 2],
    pub infinite: [bool; 2],
}

/// Samples above this are reported as an infinite integral.
const OVERFLOW: f64 = 1e300;

/// `int int_{O_id} theta^-2 |ubar - zeta_i|^2` per follower. The terminal
/// level is skipped since `theta` vanishes there by convention; elsewhere a
/// vanishing or underflowed `theta` against a nonzero mismatch is infinite.
pub fn check_target_condition(spec: &ProblemSpec, ubar: &SpaceTimeField, theta: &SpaceTimeField) -> Result<TargetCondition> {
    let g = &spec.grid;
    ubar.check_grid(g)?;
    theta.check_grid(g)?;
    let nt = g.nt();
    let mut integrals = [0.0; 2];
    let mut infinite = [false; 2];
    for i in 0..2 {
        let mut total = 0.0;
        for k in 0..nt {
            let c = TimeRule::Trapezoid.weight(k, nt);
            let (u, z, th) = (ubar.level(k), spec.targets[i].level(k), theta.level(k));
            for p in (0..u.len()).filter(|&p| spec.observe[i].contains(p)) {
                let d = u[p] - z[p];
                if d == 0.0 {
                    continue;
                }
                let v = (d / th[p]).powi(2);
                if !v.is_finite() || v > OVERFLOW {
                    infinite[i] = true;
                } else {
                    total += c * v;
                }
            }
        }
        integrals[i] = if infinite[i] {
            f64::INFINITY
        } else {
            total * g.cell_volume() * g.dt()
        };
    }
    Ok(TargetCondition { integrals, infinite })
}
