//! One function per subcommand; each returns its artifacts without writing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use snctl_core::carleman::{
    build_eta, build_weights, carleman_ratio_report, carleman_setup, check_eta, check_weight_properties,
    estimate_observability, WeightVariant,
};
use snctl_core::hum::{control_to_trajectory, dense_coupled_adjoint, solve_coupled_adjoint, Hum, HumResult, HumSettings, PenaltyMode};
use snctl_core::mesh::{inner_h, norm_st, SpaceTimeField, SubdomainMask, TimeRule};
use snctl_core::nash::{dense_oracle_nash, stepped_residual, AffineData, LinearModel, NashOptions};
use snctl_core::operators::{assemble_operators, step_matrix};
use snctl_core::semilinear::{
    sample_bounds, semilinear_null_control, solve_quasi_equilibrium, verify_equilibrium_sufficiency, NullControlOptions,
    OuterOptions,
};

use crate::config::{ConfigError, Prepared, RunConfig};
use crate::output::{Artifacts, Cell, Csv};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Nash,
    NullControl,
    Trajectory,
    Semilinear,
    SecondOrder,
    Observability,
    Carleman,
    Oracle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Nash => "nash",
            Command::NullControl => "null-control",
            Command::Trajectory => "trajectory",
            Command::Semilinear => "semilinear",
            Command::SecondOrder => "second-order",
            Command::Observability => "observability",
            Command::Carleman => "carleman",
            Command::Oracle => "oracle",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solve(#[from] snctl_core::Error),
}

impl RunError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "invalid-config",
            RunError::Solve(e) => match e {
                snctl_core::Error::ContractionFailure { .. } => "contraction-failure",
                snctl_core::Error::OuterDivergence { .. } => "outer-divergence",
                snctl_core::Error::MaxIterations { .. } | snctl_core::Error::CgMaxIterations { .. } => "max-iterations",
                snctl_core::Error::NonFiniteBreakdown(_) => "non-finite",
                snctl_core::Error::CaseMismatch(_) => "case-mismatch",
                snctl_core::Error::TooLarge { .. } => "too-large",
                _ => "solver",
            },
        }
    }
}

/// Subcommand-specific preconditions, checked before any solve.
fn validate(cmd: Command, cfg: &RunConfig, prep: &Prepared) -> Result<(), ConfigError> {
    let s = &cfg.solver;
    let positive = |v: f64, name: &str| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")))
        }
    };
    positive(s.nash_tol, "solver.nash_tol")?;
    positive(s.cg_tol, "solver.cg_tol")?;
    positive(s.outer_tol, "solver.outer_tol")?;
    for (v, name) in [(s.damping, "solver.damping"), (s.outer_damping, "solver.outer_damping")] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(ConfigError::Invalid(format!("{name} must lie in (0, 1], got {v}")));
        }
    }
    match cmd {
        Command::NullControl => {
            if cfg.weights.eps.is_empty() {
                return Err(ConfigError::Missing("weights.eps"));
            }
            for &e in &cfg.weights.eps {
                positive(e, "weights.eps entry")?;
            }
            prep.spec.require_controllability()?;
        }
        Command::Trajectory => {
            positive(cfg.weights.eps_control, "weights.eps_control")?;
            if prep.spec.ubar0.is_none() {
                return Err(ConfigError::Missing("data.ubar0"));
            }
            prep.spec.require_controllability()?;
        }
        Command::Semilinear => {
            positive(cfg.weights.eps_control, "weights.eps_control")?;
            prep.spec.require_controllability()?;
            cfg.nonlinearity.build()?;
        }
        Command::SecondOrder => {
            let nl = cfg.nonlinearity.build()?;
            if nl.second(0.0, [0.0; 2]).is_none() {
                return Err(ConfigError::Invalid(format!(
                    "second-order checks need analytic second derivatives, {} has none",
                    nl.name()
                )));
            }
        }
        Command::Observability | Command::Carleman => {
            prep.spec.require_controllability()?;
            if let Some(c) = cfg.geometry.case {
                let found = snctl_core::carleman::classify_case(&prep.spec);
                if !matches!(found, Ok(f) if f == c) {
                    return Err(ConfigError::Invalid(format!("geometry does not support the {c:?} case")));
                }
            }
        }
        Command::Nash | Command::Oracle => {}
    }
    Ok(())
}

/// Validates, then runs `cmd`.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Artifacts, RunError> {
    let prep = cfg.prepare()?;
    validate(cmd, cfg, &prep)?;
    Ok(match cmd {
        Command::Nash => run_nash(cfg, &prep)?,
        Command::NullControl => run_null_control(cfg, &prep)?,
        Command::Trajectory => run_trajectory(cfg, &prep)?,
        Command::Semilinear => run_semilinear(cfg, &prep)?,
        Command::SecondOrder => run_second_order(cfg, &prep)?,
        Command::Observability => run_observability(cfg, &prep)?,
        Command::Carleman => run_carleman(cfg, &prep)?,
        Command::Oracle => run_oracle(cfg, &prep)?,
    })
}

fn nash_options(cfg: &RunConfig) -> NashOptions {
    NashOptions {
        tol_rel: cfg.solver.nash_tol,
        max_iter: cfg.solver.nash_max_iter,
        damping: cfg.solver.damping,
        track_residuals: true,
    }
}

fn hum_settings(cfg: &RunConfig) -> HumSettings {
    HumSettings {
        damping: cfg.solver.damping,
        inner_max_iter: cfg.solver.nash_max_iter.max(HumSettings::default().inner_max_iter),
        ..HumSettings::default()
    }
}

fn run_nash(cfg: &RunConfig, prep: &Prepared) -> Result<Artifacts, snctl_core::Error> {
    let spec = &prep.spec;
    let model = LinearModel::from_spec(spec)?;
    let data = AffineData::from_spec(spec);
    let sol = model.solve_nash(&data, &prep.leader, &nash_options(cfg))?;
    let mut hist = Csv::new("iter,change_norm,residual_1,residual_2");
    for (i, step) in sol.history.iter().enumerate() {
        let r = step.residuals.unwrap_or([f64::NAN; 2]);
        hist.push([Cell::from(i + 1), step.change.into(), r[0].into(), r[1].into()]);
    }
    let costs = [
        model.follower_cost(&data, &prep.leader, [&sol.v[0], &sol.v[1]], 0)?,
        model.follower_cost(&data, &prep.leader, [&sol.v[0], &sol.v[1]], 1)?,
    ];
    let max_abs = [sol.w.max_abs(), sol.v[0].max_abs(), sol.v[1].max_abs()];
    let mut art = Artifacts {
        summary: json!({
            "iterations": sol.iterations,
            "residuals": sol.residuals,
            "contraction_ratio": sol.contraction_ratio(),
            "follower_costs": costs,
            "max_abs_w": max_abs[0],
            "max_abs_v": [max_abs[1], max_abs[2]],
            "all_zero": max_abs.iter().all(|&m| m == 0.0),
        }),
        ..Default::default()
    };
    art.csv.push(("nash_history.csv", hist));
    art.add_field(&spec.grid, "w", &sol.w);
    art.add_field(&spec.grid, "v1", &sol.v[0]);
    art.add_field(&spec.grid, "v2", &sol.v[1]);
    Ok(art)
}

fn sweep_row(csv: &mut Csv, r: &HumResult) {
    csv.push([
        Cell::from(r.eps),
        r.terminal_norm.into(),
        r.cg_iterations.into(),
        r.f_norm.into(),
        r.leader_cost.into(),
    ]);
}

fn run_null_control(cfg: &RunConfig, prep: &Prepared) -> Result<Artifacts, snctl_core::Error> {
    let spec = &prep.spec;
    let hum = Hum::new(LinearModel::from_spec(spec)?, AffineData::from_spec(spec), hum_settings(cfg))?;
    let s = &cfg.solver;
    let results: Vec<HumResult> = cfg
        .weights
        .eps
        .par_iter()
        .map(|&e| match s.penalty {
            PenaltyMode::Quadratic => hum.minimize(e, s.cg_tol, s.cg_max_iter),
            PenaltyMode::ExactNorm => hum.minimize_exact_norm(e, s.cg_tol, s.cg_max_iter),
        })
        .collect::<Result<_, _>>()?;
    let mut csv = Csv::new("eps,terminal_norm,cg_iters,f_norm,J_leader");
    for r in &results {
        sweep_row(&mut csv, r);
    }
    let norms: Vec<f64> = results.iter().map(|r| r.terminal_norm).collect();
    let strictly_decreasing = norms.windows(2).all(|w| w[1] < w[0]);
    let drop = norms[0] / norms[norms.len() - 1];
    let last = results.last().expect("non-empty sweep");
    let mut art = Artifacts {
        summary: json!({
            "penalty": s.penalty,
            "eps": cfg.weights.eps,
            "terminal_norms": norms,
            "strictly_decreasing": strictly_decreasing,
            "drop_factor": drop,
            "cg_iterations": results.iter().map(|r| r.cg_iterations).collect::<Vec<_>>(),
        }),
        ..Default::default()
    };
    art.csv.push(("sweep.csv", csv));
    art.add_field(&spec.grid, "f", &last.f);
    art.add_field(&spec.grid, "w", &last.nash.w);
    Ok(art)
}

fn run_trajectory(cfg: &RunConfig, prep: &Prepared) -> Result<Artifacts, snctl_core::Error> {
    let spec = &prep.spec;
    let s = &cfg.solver;
    let r = control_to_trajectory(spec, cfg.weights.eps_control, s.cg_tol, s.cg_max_iter)?;
    let mut csv = Csv::new("eps,terminal_norm,cg_iters,f_norm,J_leader");
    sweep_row(&mut csv, &r.hum);
    let mut art = Artifacts {
        summary: json!({
            "eps": cfg.weights.eps_control,
            "mismatch": r.mismatch,
            "f_norm": r.hum.f_norm,
            "f_max_abs": r.hum.f.max_abs(),
        }),
        ..Default::default()
    };
    art.csv.push(("sweep.csv", csv));
    art.add_field(&spec.grid, "f", &r.hum.f);
    art.add_field(&spec.grid, "u", &r.u);
    art.add_field(&spec.grid, "ubar", &r.ubar);
    Ok(art)
}

fn outer_options(cfg: &RunConfig) -> OuterOptions {
    let s = &cfg.solver;
    OuterOptions {
        tol_rel: s.outer_tol,
        max_iter: s.outer_max_iter,
        damping: s.outer_damping,
        inner: NashOptions {
            track_residuals: false,
            ..nash_options(cfg)
        },
    }
}

fn run_semilinear(cfg: &RunConfig, prep: &Prepared) -> Result<Artifacts, RunError> {
    let spec = &prep.spec;
    let nl = cfg.nonlinearity.build()?;
    let s = &cfg.solver;
    let opts = NullControlOptions {
        eps: cfg.weights.eps_control,
        cg_tol: s.cg_tol,
        cg_max_iter: s.cg_max_iter,
        outer: outer_options(cfg),
        hum: hum_settings(cfg),
    };
    let bounds = sample_bounds(nl.as_ref(), 8.0, 41);
    let r = semilinear_null_control(spec, nl.as_ref(), &opts)?;
    let mut csv = Csv::new("iter,change_norm,secant_max");
    for (i, h) in r.history.iter().enumerate() {
        csv.push([Cell::from(i + 1), h.change.into(), h.secant_max.into()]);
    }
    let mut art = Artifacts {
        summary: json!({
            "nonlinearity": nl.name(),
            "eps": opts.eps,
            "outer_iterations": r.outer_iterations,
            "mismatch": r.mismatch,
            "f_norm": r.hum.f_norm,
            "bounds": bounds,
        }),
        ..Default::default()
    };
    art.csv.push(("semilinear_history.csv", csv));
    art.add_field(&spec.grid, "f", &r.hum.f);
    art.add_field(&spec.grid, "u", &r.u);
    Ok(art)
}

fn run_second_order(cfg: &RunConfig, prep: &Prepared) -> Result<Artifacts, RunError> {
    let spec = &prep.spec;
    let nl = cfg.nonlinearity.build()?;
    let eq = solve_quasi_equilibrium(spec, nl.as_ref(), &prep.leader, &outer_options(cfg))?;
    let report = verify_equilibrium_sufficiency(spec, nl.as_ref(), &eq, cfg.solver.directions, cfg.seed)?;
    let mut csv = Csv::new("follower,sample,form");
    for (i, f) in report.followers.iter().enumerate() {
        for (d, v) in f.forms.iter().enumerate() {
            csv.push([Cell::from(i + 1), d.into(), (*v).into()]);
        }
    }
    let mut art = Artifacts {
        summary: json!({
            "nonlinearity": nl.name(),
            "outer_iterations": eq.outer_iterations,
            "first_order_residuals": eq.nash.residuals,
            "directions": report.directions,
            "min_form": [report.followers[0].min_form, report.followers[1].min_form],
            "c_hat": [report.followers[0].c_hat, report.followers[1].c_hat],
            "sufficiency_verified": report.sufficiency_verified,
            "outside_theorem_dimension": report.outside_theorem_dimension,
        }),
        ..Default::default()
    };
    art.csv.push(("second_order.csv", csv));
    art.add_field(&spec.grid, "u", &eq.u);
    Ok(art)
}

fn run_observability(cfg: &RunConfig, prep: &Prepared) -> Result<Artifacts, snctl_core::Error> {
    let spec = &prep.spec;
    let setup = carleman_setup(spec, &prep.carleman, cfg.geometry.case)?;
    let model = LinearModel::from_spec(spec)?;
    let r = estimate_observability(&model, &setup.theta, cfg.solver.samples, cfg.seed)?;
    let mut csv = Csv::new("sample,ratio,denominator");
    for (i, (ratio, d)) in r.ratios.iter().zip(&r.denominators).enumerate() {
        csv.push([Cell::from(i), (*ratio).into(), (*d).into()]);
    }
    let mut art = Artifacts {
        summary: json!({
            "case": setup.case,
            "samples": cfg.solver.samples,
            "stats": r.stats,
            "resampled": r.resampled,
            "all_finite": r.all_finite,
            "denominators_positive": r.denominators_positive,
        }),
        ..Default::default()
    };
    art.csv.push(("observability.csv", csv));
    Ok(art)
}

fn run_carleman(cfg: &RunConfig, prep: &Prepared) -> Result<Artifacts, snctl_core::Error> {
    let spec = &prep.spec;
    let g = &spec.grid;
    let setup = carleman_setup(spec, &prep.carleman, cfg.geometry.case)?;
    let (sharp, omega) = match &prep.omega0 {
        Some((center, mask)) => {
            let eta = build_eta(g, center)?;
            let s = prep.carleman.s_for(g.t_final());
            (build_weights(g, &eta, prep.carleman.lambda, s, WeightVariant::Sharp)?, mask.clone())
        }
        None => (setup.sharp.clone(), setup.omega.clone()),
    };
    let eta_report = check_eta(g, &sharp.eta, &omega);
    let weights = check_weight_properties(g, &sharp, 100, cfg.seed);
    let ell: Vec<_> = setup.ell.iter().map(|w| check_weight_properties(g, w, 100, cfg.seed)).collect();
    let report = carleman_ratio_report(g, &sharp, &omega, cfg.solver.samples, cfg.seed, cfg.solver.divergence_source)?;
    let mut csv = Csv::new("sample,lhs,rhs,ratio");
    for (i, s) in &report.samples {
        csv.push([Cell::from(*i), s.log_lhs.into(), s.log_rhs.into(), s.ratio.into()]);
    }
    let mut art = Artifacts {
        summary: json!({
            "case": setup.case,
            "lambda": sharp.lambda,
            "s": sharp.s,
            "eta": eta_report,
            "weights": weights,
            "ell_weights": ell,
            "stats": report.stats,
            "skipped": report.skipped,
            "all_finite_positive": report.all_finite_positive,
            "log_theta_max": setup.theta.log_theta.values().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }),
        ..Default::default()
    };
    art.csv.push(("carleman_ratio.csv", csv));
    Ok(art)
}

fn run_oracle(cfg: &RunConfig, prep: &Prepared) -> Result<Artifacts, snctl_core::Error> {
    let spec = &prep.spec;
    let g = &spec.grid;
    let mut csv = Csv::new("check,value");
    let mut checks = Vec::new();

    let mut transpose_gap = 0.0_f64;
    for k in 1..=g.nt() {
        let op = assemble_operators(g, &spec.coeffs, k)?;
        let fwd = step_matrix(g, &op.forward).transpose();
        let adj = step_matrix(g, &op.adjoint);
        transpose_gap = transpose_gap.max(fwd.max_abs_diff(&adj));
    }
    checks.push(("transpose_gap", transpose_gap));

    let model = LinearModel::from_spec(spec)?;
    let data = AffineData::from_spec(spec);
    let opts = NashOptions {
        track_residuals: false,
        ..nash_options(cfg)
    };
    let iter = model.solve_nash(&data, &prep.leader, &opts)?;
    let dense = dense_oracle_nash(&model, &data, &prep.leader)?;
    let full = SubdomainMask::full(g);
    let dist = norm_st(g, &iter.w.sub(&dense.w), &full, TimeRule::Right)
        / norm_st(g, &dense.w, &full, TimeRule::Right).max(f64::MIN_POSITIVE);
    checks.push(("nash_relative_distance", dist));
    checks.push(("nash_stepped_residual", stepped_residual(&model, &data, &prep.leader, &iter)?));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let psi0: Vec<f64> = (0..g.n_interior()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = solve_coupled_adjoint(&model, &psi0, 1e-13, 500)?;
    let b = dense_coupled_adjoint(&model, &psi0)?;
    let gap = norm_st(g, &a.psi.sub(&b.psi), &full, TimeRule::Left)
        / norm_st(g, &b.psi, &full, TimeRule::Left).max(f64::MIN_POSITIVE);
    checks.push(("coupled_adjoint_relative_distance", gap));

    let src = SpaceTimeField::from_fn(g, |x, t| (x[0] + t).cos());
    let w = model.state.forward(&spec.u0, Some(&src))?;
    let psi = model.state.adjoint(&psi0, None)?;
    let lhs = inner_h(g, &psi0, w.level(g.nt()));
    let mut rhs = inner_h(g, psi.level(0), &spec.u0);
    for k in 0..g.nt() {
        rhs += g.dt() * inner_h(g, psi.level(k), src.level(k));
    }
    checks.push(("duality_relative_gap", (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE)));

    for (name, v) in &checks {
        csv.push([Cell::Text((*name).to_string()), (*v).into()]);
    }
    let mut summary = serde_json::Map::new();
    for (name, v) in &checks {
        summary.insert((*name).to_string(), json!(v));
    }
    let mut art = Artifacts {
        summary: serde_json::Value::Object(summary),
        ..Default::default()
    };
    art.csv.push(("oracle.csv", csv));
    Ok(art)
}

/// Normalized config, versions and seed.
#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub seed: u64,
    pub threads: usize,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(cmd: Command, cfg: &RunConfig, threads: usize) -> Result<Self, ConfigError> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: cmd.name(),
            seed: cfg.seed,
            threads,
            config: cfg.normalized()?,
        })
    }
}
