use proptest::prelude::*;
use snctl_core::hum::control_to_trajectory;
use snctl_core::mesh::{norm_st, Grid, SpaceTimeField, SubdomainMask, TimeRule};
use snctl_core::nash::solve_nash_fixed_point;
use snctl_core::operators::{assemble_operators, step_matrix, ProblemSpec};
use snctl_core::presets::{reference_1d, reference_1d_variable, reference_2d};
use snctl_core::semilinear::{
    eval_secant_coeffs, random_direction, sample_bounds, second_order_form, semilinear_null_control,
    solve_quasi_equilibrium, solve_semilinear_state, verify_equilibrium_sufficiency, ExprNonlinearity, GradTanh,
    Nonlinearity, NullControlOptions, OuterOptions, QuasiEquilibrium, Tanh, Zero,
};
use snctl_core::Error;

fn leader(g: &Grid) -> SpaceTimeField {
    SpaceTimeField::from_fn(g, |x, t| (x[0] + 2.0 * t).sin())
}

fn spec() -> ProblemSpec {
    reference_1d_variable(12, 10, 1.0, 1e-2, 1.0).unwrap()
}

fn rel(a: &SpaceTimeField, b: &SpaceTimeField) -> f64 {
    a.sub(b).max_abs() / b.max_abs().max(1e-300)
}

#[test]
fn secant_of_tanh_at_one() {
    let g = Grid::new(1, &[1.0], &[8], 1.0, 4).unwrap();
    let z = SpaceTimeField::from_values(g.n_interior(), g.nt(), vec![1.0; g.n_interior() * (g.nt() + 1)]).unwrap();
    let c = eval_secant_coeffs(&Tanh { c: 1.0 }, &g, None, &z).unwrap();
    // d/dtau tanh(tau) = sech^2(tau), so the mean over [0, 1] is tanh(1)
    for v in c.g1.values() {
        assert!((v - 1.0_f64.tanh()).abs() <= 1e-10, "{v}");
    }
    assert!(c.g2[0].values().iter().all(|&v| v == 0.0));
}

#[test]
fn secant_of_linear_and_at_zero() {
    let g = Grid::new(1, &[1.0], &[8], 1.0, 4).unwrap();
    let z = SpaceTimeField::from_fn(&g, |x, t| 3.0 * x[0] - t);
    let lin = ExprNonlinearity::parse("2.5*u", Some(2.5)).unwrap();
    let c = eval_secant_coeffs(&lin, &g, None, &z).unwrap();
    assert!(c.g1.values().iter().all(|v| (v - 2.5).abs() < 1e-8));
    let gt = GradTanh { c1: 0.3, c2: -0.7 };
    let c = eval_secant_coeffs(&gt, &g, None, &SpaceTimeField::zeros(&g)).unwrap();
    assert!(c.g1.values().iter().all(|v| (v - 0.3).abs() < 1e-14));
    assert!(c.g2[0].values().iter().all(|v| (v + 0.7).abs() < 1e-14));
}

proptest! {
    #[test]
    fn secant_reproduces_increment(ub in -2.0f64..2.0, pb in -2.0f64..2.0, zv in -2.0f64..2.0, pz in -2.0f64..2.0) {
        // one-node check of G1 z + G2 pz = F(ub + z) - F(ub) via the analytic secant
        let nl = GradTanh { c1: 0.8, c2: 0.4 };
        let mut c = 0.0;
        let mut d = 0.0;
        let n = 4000;
        for j in 0..n {
            let tau = (j as f64 + 0.5) / n as f64;
            c += nl.d_u(ub + tau * zv, [pb + tau * pz, 0.0]) / n as f64;
            d += nl.d_p(ub + tau * zv, [pb + tau * pz, 0.0])[0] / n as f64;
        }
        let inc = nl.value(ub + zv, [pb + pz, 0.0]) - nl.value(ub, [pb, 0.0]);
        prop_assert!((c * zv + d * pz - inc).abs() < 1e-6);
    }

    #[test]
    fn tanh_presets_stay_within_bound(c1 in -2.0f64..2.0, c2 in -2.0f64..2.0) {
        let r = sample_bounds(&GradTanh { c1, c2 }, 6.0, 9);
        prop_assert!(r.within_bound);
        prop_assert!(r.value_at_origin.is_finite());
    }
}

#[test]
fn half_tanh_bound() {
    let r = sample_bounds(&Tanh { c: 0.5 }, 8.0, 41);
    assert!(r.max_du <= 0.5 && r.within_bound);
    assert!((r.max_du - 0.5).abs() < 1e-12);
}

#[test]
fn zero_nonlinearity_reduces_to_linear_nash() {
    let s = spec();
    let f = leader(&s.grid);
    let lin = solve_nash_fixed_point(&s, &f, 1e-12, 200).unwrap();
    let opts = OuterOptions {
        inner: snctl_core::nash::NashOptions {
            tol_rel: 1e-12,
            ..Default::default()
        },
        ..Default::default()
    };
    let q = solve_quasi_equilibrium(&s, &Zero, &f, &opts).unwrap();
    assert!(rel(&q.u, &lin.w) <= 1e-10);
    for i in 0..2 {
        assert!(rel(&q.phi[i], &lin.phi[i]) <= 1e-10);
    }
}

#[test]
fn zero_data_gives_zero_fields() {
    let mut s = spec();
    s.u0 = vec![0.0; s.grid.n_interior()];
    s.targets = [SpaceTimeField::zeros(&s.grid), SpaceTimeField::zeros(&s.grid)];
    let q = solve_quasi_equilibrium(&s, &Tanh { c: 0.5 }, &SpaceTimeField::zeros(&s.grid), &OuterOptions::default())
        .unwrap();
    assert_eq!(q.u.max_abs(), 0.0);
    assert_eq!(q.phi[0].max_abs() + q.phi[1].max_abs(), 0.0);
    assert_eq!(q.outer_iterations, 1);
}

/// Stepped residuals of the semilinear optimality system, assembled from the
/// base coefficients and the analytic `F = c tanh(u)`.
fn plug_back(s: &ProblemSpec, c: f64, f: &SpaceTimeField, q: &QuasiEquilibrium) -> (f64, f64) {
    let g = &s.grid;
    let n = g.n_interior();
    let dt = g.dt();
    let mut state = 0.0_f64;
    let mut follower = 0.0_f64;
    let scale = q.u.max_abs();
    let lead = s.leader.indicator();
    let ctrl = [s.control[0].indicator(), s.control[1].indicator()];
    let obs = [s.observe[0].indicator(), s.observe[1].indicator()];
    for k in 1..=g.nt() {
        let m = step_matrix(g, &assemble_operators(g, &s.coeffs, k).unwrap().forward);
        let uk = q.u.level(k);
        let mu = m.mul_vec(uk);
        for p in 0..n {
            let src = lead[p] * f.level(k - 1)[p] + ctrl[0][p] * q.v[0].level(k - 1)[p] + ctrl[1][p] * q.v[1].level(k - 1)[p];
            let r = mu[p] - q.u.level(k - 1)[p] - dt * (c * uk[p].tanh() + src);
            state = state.max(r.abs() / scale);
        }
        let mut lin = s.coeffs.clone();
        for p in 0..n {
            lin.a.level_mut(k)[p] -= c / uk[p].cosh().powi(2);
        }
        let mt = step_matrix(g, &assemble_operators(g, &lin, k).unwrap().adjoint);
        for i in 0..2 {
            let lhs = mt.mul_vec(q.phi[i].level(k - 1));
            let pscale = q.phi[i].max_abs();
            for p in 0..n {
                let r = lhs[p] - q.phi[i].level(k)[p] - dt * s.alpha[i] * obs[i][p] * (uk[p] - s.targets[i].level(k)[p]);
                follower = follower.max(r.abs() / pscale);
            }
        }
    }
    (state, follower)
}

#[test]
fn quasi_equilibrium_satisfies_stepped_equations() {
    let s = spec();
    let f = leader(&s.grid);
    let nl = Tanh { c: 0.5 };
    let q = solve_quasi_equilibrium(&s, &nl, &f, &OuterOptions::default()).unwrap();
    let (rs, rf) = plug_back(&s, 0.5, &f, &q);
    assert!(rs <= 1e-8, "state residual {rs}");
    assert!(rf <= 1e-8, "follower residual {rf}");
    for i in 0..2 {
        let v = q.phi[i].masked(&s.control[i]).scaled(-1.0 / s.mu[i]);
        assert_eq!(v.values(), q.v[i].values());
        assert!(q.nash.residuals[i] <= 1e-9);
    }
    assert!(q.history.iter().all(|h| h.change.is_finite() && h.secant_max <= 0.5 + 1e-12));
}

#[test]
fn quasi_equilibrium_in_2d_with_gradient_term() {
    let s = reference_2d(6, 6, 1e-2, 1.0).unwrap();
    let f = SpaceTimeField::from_fn(&s.grid, |x, t| x[0] * x[1] - t);
    let q = solve_quasi_equilibrium(&s, &GradTanh { c1: 0.4, c2: 0.3 }, &f, &OuterOptions::default()).unwrap();
    assert!(q.u.is_finite());
    assert!(q.history.iter().all(|h| h.secant_max <= 0.7 + 1e-12));
}

#[test]
fn semilinear_state_matches_plain_march_when_linear() {
    let s = spec();
    let src = leader(&s.grid);
    let u = solve_semilinear_state(&s, &Zero, &s.u0, Some(&src), &OuterOptions::default()).unwrap();
    let p = snctl_core::operators::Propagator::new(&s.grid, &s.coeffs).unwrap();
    assert_eq!(u.values(), p.forward(&s.u0, Some(&src)).unwrap().values());
}

#[test]
fn null_control_reduces_to_linear_trajectory() {
    let mut s = reference_1d(16, 16, 1.0, 1e-3, 1.0).unwrap();
    s.ubar0 = Some(s.grid.sample(|x| 0.3 * (std::f64::consts::PI * x[0] / 4.0).sin()));
    let opts = NullControlOptions::default();
    let lin = control_to_trajectory(&s, opts.eps, opts.cg_tol, opts.cg_max_iter).unwrap();
    let nl = semilinear_null_control(&s, &Zero, &opts).unwrap();
    assert_eq!(nl.hum.f.values(), lin.hum.f.values());
    assert_eq!(nl.u.values(), lin.u.values());
    assert_eq!(nl.mismatch, lin.mismatch);
}

#[test]
fn null_control_with_trivial_data() {
    let mut s = reference_1d(12, 10, 1.0, 1e-3, 1.0).unwrap();
    s.ubar0 = Some(s.u0.clone());
    let nl = Tanh { c: 0.5 };
    let opts = NullControlOptions::default();
    let ubar = solve_semilinear_state(&s, &nl, &s.u0, None, &opts.outer).unwrap();
    s.targets = [ubar.clone(), ubar];
    let r = semilinear_null_control(&s, &nl, &opts).unwrap();
    assert_eq!(r.hum.f.max_abs(), 0.0);
    assert_eq!(r.outer_iterations, 1);
}

#[test]
fn semilinear_null_control_tracks_linear_mismatch() {
    let s = reference_1d(16, 16, 1.0, 1e-3, 1.0).unwrap();
    let opts = NullControlOptions::default();
    let r = semilinear_null_control(&s, &Tanh { c: 0.5 }, &opts).unwrap();
    let lin = semilinear_null_control(&s, &Zero, &opts).unwrap();
    assert!(r.outer_iterations <= 30);
    assert!(r.mismatch.is_finite() && r.mismatch <= 10.0 * lin.mismatch, "{} vs {}", r.mismatch, lin.mismatch);
}

#[test]
fn damping_outside_range_is_rejected() {
    let s = spec();
    let opts = OuterOptions {
        damping: 1.5,
        ..Default::default()
    };
    let err = solve_quasi_equilibrium(&s, &Zero, &leader(&s.grid), &opts).unwrap_err();
    assert!(matches!(err, Error::InvalidSpec(_)));
}

fn equilibrium(s: &ProblemSpec, nl: &dyn Nonlinearity) -> QuasiEquilibrium {
    let opts = OuterOptions {
        tol_rel: 1e-13,
        inner: snctl_core::nash::NashOptions {
            tol_rel: 1e-13,
            max_iter: 400,
            ..Default::default()
        },
        ..Default::default()
    };
    solve_quasi_equilibrium(s, nl, &leader(&s.grid), &opts).unwrap()
}

#[test]
fn second_order_form_is_quadratic() {
    let s = spec();
    let nl = Tanh { c: 0.5 };
    let q = equilibrium(&s, &nl);
    let w = random_direction(&s.grid, &s.control[0], 1);
    let w2 = random_direction(&s.grid, &s.control[0], 2);
    let form = |v: &SpaceTimeField| second_order_form(&s, &nl, &q, 0, v).unwrap();
    let lhs = form(&w.add(&w2)) + form(&w.sub(&w2));
    let rhs = 2.0 * form(&w) + 2.0 * form(&w2);
    assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs());
    assert_eq!(form(&SpaceTimeField::zeros(&s.grid)), 0.0);
    assert!((form(&w.scaled(3.0)) - 9.0 * form(&w)).abs() <= 1e-10 * form(&w));
}

#[test]
fn second_order_form_matches_second_difference() {
    let s = spec();
    let nl = GradTanh { c1: 0.5, c2: 0.3 };
    let q = equilibrium(&s, &nl);
    let f = leader(&s.grid);
    let i = 1;
    let w = random_direction(&s.grid, &s.control[i], 9);
    let cost = |t: f64| {
        let mut v = q.v.clone();
        v[i].axpy(t, &w);
        let mut src = f.masked(&s.leader);
        for j in 0..2 {
            src.axpy(1.0, &v[j].masked(&s.control[j]));
        }
        let opts = OuterOptions {
            tol_rel: 1e-14,
            max_iter: 100,
            ..Default::default()
        };
        let u = solve_semilinear_state(&s, &nl, &s.u0, Some(&src), &opts).unwrap();
        0.5 * s.alpha[i] * norm_st(&s.grid, &u.sub(&s.targets[i]), &s.observe[i], TimeRule::Right).powi(2)
            + 0.5 * s.mu[i] * norm_st(&s.grid, &v[i], &s.control[i], TimeRule::Left).powi(2)
    };
    let t = 0.05;
    let fd = (cost(t) - 2.0 * cost(0.0) + cost(-t)) / (t * t);
    let form = second_order_form(&s, &nl, &q, i, &w).unwrap();
    assert!((fd - form).abs() <= 1e-4 * form.abs(), "fd {fd} form {form}");
}

#[test]
fn linear_form_is_nonnegative() {
    let s = spec();
    let q = equilibrium(&s, &Zero);
    for seed in 0..5 {
        let w = random_direction(&s.grid, &s.control[0], seed);
        let form = second_order_form(&s, &Zero, &q, 0, &w).unwrap();
        assert!(form >= s.mu[0] * (1.0 - 1e-12));
    }
}

#[test]
fn expression_nonlinearity_has_no_second_order() {
    let s = spec();
    let nl = ExprNonlinearity::parse("0.5*tanh(u)", None).unwrap();
    let q = solve_quasi_equilibrium(&s, &nl, &leader(&s.grid), &OuterOptions::default()).unwrap();
    let w = random_direction(&s.grid, &s.control[0], 0);
    assert!(matches!(second_order_form(&s, &nl, &q, 0, &w), Err(Error::Unsupported(_))));
    assert!((nl.bound - 0.5).abs() < 1e-6);
}

#[test]
fn sufficiency_report() {
    let s = reference_1d(16, 16, 1.0, 1e-3, 1.0).unwrap();
    let nl = Tanh { c: 0.5 };
    let q = equilibrium(&s, &nl);
    let r = verify_equilibrium_sufficiency(&s, &nl, &q, 20, 3).unwrap();
    assert!(r.sufficiency_verified && r.outside_theorem_dimension);
    assert!(r.followers.iter().all(|f| f.forms.len() == 20 && f.all_positive));

    let empty = verify_equilibrium_sufficiency(&s, &nl, &q, 0, 3).unwrap();
    assert!(empty.followers.iter().all(|f| f.forms.is_empty()));
    assert!(!empty.sufficiency_verified);

    let mut heavy = s.clone();
    heavy.mu = [100.0, 100.0];
    let qh = equilibrium(&heavy, &nl);
    let rh = verify_equilibrium_sufficiency(&heavy, &nl, &qh, 20, 3).unwrap();
    for i in 0..2 {
        assert!(rh.followers[i].min_form > r.followers[i].min_form);
    }
}

#[test]
fn directions_are_unit_and_supported() {
    let s = spec();
    let m: &SubdomainMask = &s.control[1];
    let w = random_direction(&s.grid, m, 4);
    assert!((norm_st(&s.grid, &w, m, TimeRule::Left) - 1.0).abs() < 1e-12);
    assert_eq!(w.masked(m).values(), w.values());
}
