use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snctl_core::carleman::{
    build_eta, build_eta_pair, build_theta, build_weights, carleman_ratio, carleman_ratio_report, carleman_setup,
    check_eta, check_weight_properties, estimate_observability, observability_ratio, CarlemanParams, CarlemanSource,
    TargetCase, WeightVariant,
};
use snctl_core::mesh::{inner_h, Grid, SpaceTimeField, SubdomainMask, TimeRule};
use snctl_core::nash::LinearModel;
use snctl_core::operators::{Coefficients, Propagator};
use snctl_core::presets::{reference_1d, reference_1d_distinct, reference_1d_variable, reference_2d};
use snctl_core::Error;

fn unit_grid(nx: usize, nt: usize) -> Grid {
    Grid::new(1, &[1.0], &[nx], 1.0, nt).unwrap()
}

#[test]
fn symmetric_center_gives_the_quadratic() {
    let g = Grid::new(1, &[3.0], &[20], 1.0, 4).unwrap();
    let eta = build_eta(&g, &[1.5]).unwrap();
    for i in 0..=30 {
        let x = 0.1 * i as f64;
        assert!((eta.value([x, 0.0]) - x * (3.0 - x)).abs() <= 1e-14);
        assert!((eta.gradient([x, 0.0])[0] - (3.0 - 2.0 * x)).abs() <= 1e-13);
    }
    assert_eq!(eta.value([1.5, 0.0]), 2.25);
    assert_eq!(eta.max_norm(), 2.25);
}

#[test]
fn off_center_weight_has_no_other_critical_point() {
    let g = unit_grid(41, 4);
    let eta = build_eta(&g, &[0.3]).unwrap();
    let omega0 = SubdomainMask::from_box(&g, &[(0.2 + 1e-9, 0.4 - 1e-9)]).unwrap();
    let rep = check_eta(&g, &eta, &omega0);
    assert!(rep.interior_positive);
    assert!(rep.boundary_zero);
    assert!(rep.min_gradient_outside > 0.0);
    assert!(eta.gradient([0.3, 0.0])[0].abs() <= 1e-15);
    assert!((eta.value([0.3, 0.0]) - 0.25).abs() <= 1e-15);
}

#[test]
fn weight_gradient_matches_central_differences() {
    let g = Grid::new(2, &[2.0, 1.0], &[9, 9], 1.0, 4).unwrap();
    let eta = build_eta(&g, &[0.7, 0.6]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let x = [rng.random_range(0.05..1.95), rng.random_range(0.05..0.95)];
        let grad = eta.gradient(x);
        for d in 0..2 {
            let h = 1e-6;
            let (mut xp, mut xm) = (x, x);
            xp[d] += h;
            xm[d] -= h;
            let fd = (eta.value(xp) - eta.value(xm)) / (2.0 * h);
            assert!((fd - grad[d]).abs() <= 1e-7, "{fd} vs {}", grad[d]);
        }
    }
    let rep = check_eta(&g, &eta, &SubdomainMask::from_box(&g, &[(0.5, 0.9), (0.4, 0.8)]).unwrap());
    assert!(rep.interior_positive && rep.boundary_zero && rep.min_gradient_outside > 0.0);
}

#[test]
fn invalid_centers_are_rejected() {
    let g = unit_grid(10, 4);
    for c in [vec![0.0], vec![1.0], vec![-0.2], vec![0.5, 0.5]] {
        assert!(matches!(build_eta(&g, &c), Err(Error::InvalidCenter(_))));
    }
}

#[test]
fn paired_weights_agree_outside_the_band() {
    let g = Grid::new(1, &[4.0], &[40], 1.0, 4).unwrap();
    let [e1, e2] = build_eta_pair(&g, [&[1.6], &[2.25]], (1.0, 2.6)).unwrap();
    assert_eq!(e1.max_norm(), e2.max_norm());
    for i in 0..=400 {
        let x = 0.01 * i as f64;
        let (a, b) = (e1.value([x, 0.0]), e2.value([x, 0.0]));
        if !(1.0..=2.6).contains(&x) {
            assert!((a - b).abs() <= 1e-14, "{x}");
        }
        assert!(a <= 4.0 + 1e-14 && b <= 4.0 + 1e-14);
    }
    assert!((e1.value([1.6, 0.0]) - 4.0).abs() <= 1e-14);
    assert!((e2.value([2.25, 0.0]) - 4.0).abs() <= 1e-14);
    assert!(e1.gradient([1.6, 0.0])[0].abs() <= 1e-14);
    for eta in [&e1, &e2] {
        assert!(check_eta(&g, eta, &SubdomainMask::from_box(&g, &[(1.5, 2.4)]).unwrap()).min_gradient_outside > 0.0);
    }
    assert!(matches!(build_eta_pair(&g, [&[0.8], &[2.0]], (1.0, 2.6)), Err(Error::InvalidCenter(_))));
}

#[test]
fn weights_signs_and_endpoint_conventions() {
    let g = unit_grid(16, 8);
    let eta = build_eta(&g, &[0.4]).unwrap();
    let sharp = build_weights(&g, &eta, 1.5, 3.0, WeightVariant::Sharp).unwrap();
    let ell = build_weights(&g, &eta, 1.5, 3.0, WeightVariant::Ell).unwrap();
    for k in 0..=8 {
        let endpoint_sharp = k == 0 || k == 8;
        for p in 0..g.n_interior() {
            let (a, x) = (sharp.alpha.level(k)[p], sharp.xi.level(k)[p]);
            if endpoint_sharp {
                assert_eq!(a, f64::NEG_INFINITY);
                assert_eq!(x, f64::MAX);
            } else {
                assert!(a < 0.0 && x > 0.0);
            }
            assert_eq!(ell.alpha.level(k)[p] == f64::NEG_INFINITY, k == 8);
        }
    }
    let m = eta.max_norm();
    for p in 0..g.n_interior() {
        let e = eta.value(g.coords(p));
        let expect = 0.5 * (-1.5 * (2.0 * m + e)).exp();
        assert!((1.0 / sharp.xi.level(4)[p] - expect).abs() <= 1e-15);
    }
    assert!(matches!(build_weights(&g, &eta, 0.0, 1.0, WeightVariant::Sharp), Err(Error::InvalidSpec(_))));
}

#[test]
fn weight_properties_hold() {
    let g = unit_grid(24, 24);
    let eta = build_eta(&g, &[0.3]).unwrap();
    for lambda in [1.0, 2.0] {
        let w = build_weights(&g, &eta, lambda, 4.0, WeightVariant::Sharp).unwrap();
        let rep = check_weight_properties(&g, &w, 100, 10);
        assert!(rep.gradient_identity, "{}", rep.gradient_max_rel_error);
        assert!(rep.xi_inverse_bound);
        assert!(rep.time_bound_relaxed);
        assert!(rep.time_bound_stated);
    }
    let spec = reference_2d(9, 4, 1e-3, 1.0).unwrap();
    let set = carleman_setup(&spec, &CarlemanParams::default(), None).unwrap();
    assert!(check_weight_properties(&spec.grid, &set.sharp, 100, 3).gradient_identity);
}

#[test]
fn time_derivatives_match_differences_and_vanish_at_midtime() {
    let g = unit_grid(16, 8);
    let eta = build_eta(&g, &[0.6]).unwrap();
    let w = build_weights(&g, &eta, 1.0, 2.0, WeightVariant::Sharp).unwrap();
    let (at, xt) = w.time_derivatives([0.3, 0.0], 0.5).unwrap();
    assert!(at.abs() <= 1e-12 && xt.abs() <= 1e-12);
    for t in [0.2, 0.45, 0.7, 0.9] {
        let h = 1e-6;
        let (at, xt) = w.time_derivatives([0.3, 0.0], t).unwrap();
        let fa = (w.alpha_at([0.3, 0.0], t + h) - w.alpha_at([0.3, 0.0], t - h)) / (2.0 * h);
        let fx = (w.xi_at([0.3, 0.0], t + h) - w.xi_at([0.3, 0.0], t - h)) / (2.0 * h);
        assert!((fa - at).abs() <= 1e-6 * at.abs().max(1.0));
        assert!((fx - xt).abs() <= 1e-6 * xt.abs().max(1.0));
    }
    let ell = build_weights(&g, &eta, 1.0, 2.0, WeightVariant::Ell).unwrap();
    assert_eq!(ell.time_derivatives([0.3, 0.0], 0.25).unwrap(), (0.0, 0.0));
}

#[test]
fn theta_cases() {
    let g = unit_grid(16, 8);
    let eta = build_eta(&g, &[0.5]).unwrap();
    let w = build_weights(&g, &eta, 1.0, 1.0, WeightVariant::Ell).unwrap();
    let shared = build_theta(std::slice::from_ref(&w), TargetCase::Shared).unwrap();
    let twin = build_theta(&[w.clone(), w.clone()], TargetCase::Distinct).unwrap();
    assert_eq!(shared.theta, twin.theta);
    for k in 0..8 {
        assert!(shared.theta.level(k).iter().all(|&v| v > 0.0 && v.is_finite()));
    }
    assert!(shared.theta.level(8).iter().all(|&v| v == 0.0));
    for p in 0..g.n_interior() {
        let x = g.coords(p);
        let expect = w.xi_at(x, 0.25).powi(3) * (w.s * w.alpha_at(x, 0.25)).exp();
        assert!((shared.theta.level(2)[p] - expect).abs() <= 1e-12 * expect);
    }
    assert!(matches!(build_theta(&[w.clone(), w.clone()], TargetCase::Shared), Err(Error::CaseMismatch(_))));
    let sharp = build_weights(&g, &eta, 1.0, 1.0, WeightVariant::Sharp).unwrap();
    assert!(build_theta(&[sharp], TargetCase::Shared).is_err());
}

#[test]
fn setup_follows_the_geometry() {
    let shared = reference_1d(16, 8, 1.0, 1e-3, 1.0).unwrap();
    assert_eq!(carleman_setup(&shared, &CarlemanParams::default(), None).unwrap().case, TargetCase::Shared);
    assert!(matches!(
        carleman_setup(&shared, &CarlemanParams::default(), Some(TargetCase::Distinct)),
        Err(Error::CaseMismatch(_))
    ));
    let distinct = reference_1d_distinct(16, 8, 1.0, 1e-3, 1.0).unwrap();
    let set = carleman_setup(&distinct, &CarlemanParams::default(), None).unwrap();
    assert_eq!(set.case, TargetCase::Distinct);
    assert_eq!(set.ell.len(), 2);
    assert!(matches!(
        carleman_setup(&distinct, &CarlemanParams::default(), Some(TargetCase::Shared)),
        Err(Error::CaseMismatch(_))
    ));
    let mixed = reference_1d_variable(16, 8, 1.0, 1e-3, 1.0).unwrap();
    assert!(matches!(carleman_setup(&mixed, &CarlemanParams::default(), None), Err(Error::CaseMismatch(_))));
}

#[test]
fn zero_sample_is_skipped() {
    let g = unit_grid(12, 8);
    let prop = Propagator::new(&g, &Coefficients::zeros(&g)).unwrap();
    let w = build_weights(&g, &build_eta(&g, &[0.5]).unwrap(), 1.0, 2.0, WeightVariant::Sharp).unwrap();
    let omega = SubdomainMask::from_box(&g, &[(0.4, 0.6)]).unwrap();
    let zero = vec![0.0; g.n_interior()];
    let r = carleman_ratio(&prop, &w, &omega, &zero, &CarlemanSource::Plain(SpaceTimeField::zeros(&g))).unwrap();
    assert_eq!(r, None);
}

#[test]
fn carleman_ratios_are_finite_and_positive() {
    let g = unit_grid(24, 24);
    let omega = SubdomainMask::from_box(&g, &[(0.4, 0.6)]).unwrap();
    let w = build_weights(&g, &build_eta(&g, &[0.5]).unwrap(), 2.0, 4.0, WeightVariant::Sharp).unwrap();
    let base = carleman_ratio_report(&g, &w, &omega, 20, 0, false).unwrap();
    assert_eq!(base.ratios.len(), 20);
    assert!(base.all_finite_positive);
    let w2 = build_weights(&g, &w.eta, 2.0, 8.0, WeightVariant::Sharp).unwrap();
    let doubled = carleman_ratio_report(&g, &w2, &omega, 20, 0, false).unwrap();
    assert!(doubled.all_finite_positive);
    assert_ne!(doubled.ratios, base.ratios);
    let div = carleman_ratio_report(&g, &w, &omega, 20, 0, true).unwrap();
    assert!(div.all_finite_positive);
}

#[test]
fn decoupled_observability_ratio() {
    let spec = reference_1d(16, 16, 1.0, 0.0, 1.0).unwrap();
    let g = &spec.grid;
    let set = carleman_setup(&spec, &CarlemanParams::default(), None).unwrap();
    let model = LinearModel::from_spec(&spec).unwrap();
    let psi0 = spec.u0.clone();
    let (r, d) = observability_ratio(&model, &set.theta, &psi0, 1e-12, 50).unwrap();
    let psi = Propagator::new(g, &Coefficients::zeros(g)).unwrap().adjoint(&psi0, None).unwrap();
    let mut den = 0.0;
    for k in 0..=g.nt() {
        let c = TimeRule::Trapezoid.weight(k, g.nt());
        for p in (0..g.n_interior()).filter(|&p| spec.leader.contains(p)) {
            den += c * psi.level(k)[p].powi(2);
        }
    }
    den *= g.cell_volume() * g.dt();
    let num = inner_h(g, psi.level(0), psi.level(0));
    assert!((d - den).abs() <= 1e-12 * den);
    assert!((r - num / den).abs() <= 1e-12 * r);
}

#[test]
fn full_observation_region_lowers_the_ratios() {
    let spec = reference_1d(16, 16, 1.0, 1e-3, 1.0).unwrap();
    let set = carleman_setup(&spec, &CarlemanParams::default(), None).unwrap();
    let mut model = LinearModel::from_spec(&spec).unwrap();
    let local = estimate_observability(&model, &set.theta, 50, 11).unwrap();
    assert!(local.all_finite && local.denominators_positive);
    assert!(local.ratios.iter().all(|&r| r > 0.0));
    assert_eq!(local.resampled, 0);
    model.leader = SubdomainMask::full(&spec.grid);
    let full = estimate_observability(&model, &set.theta, 50, 11).unwrap();
    assert!(full.stats.max < local.stats.max);
    assert!(full.ratios.iter().zip(&local.ratios).all(|(a, b)| a <= b));
}

#[test]
fn observability_with_distinct_targets() {
    let spec = reference_1d_distinct(16, 12, 1.0, 1e-2, 1.0).unwrap();
    let set = carleman_setup(&spec, &CarlemanParams { lambda: 0.05, s: Some(0.5) }, None).unwrap();
    assert!(set.theta.theta.level(3).iter().all(|&v| v > 0.0));
    let model = LinearModel::from_spec(&spec).unwrap();
    let rep = estimate_observability(&model, &set.theta, 10, 4).unwrap();
    assert!(rep.all_finite && rep.denominators_positive);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn monotone_map_keeps_its_center(c in 0.05f64..0.95, l in 0.5f64..5.0, t in 0.0f64..1.0) {
        let g = Grid::new(1, &[l], &[8], 1.0, 4).unwrap();
        let eta = build_eta(&g, &[c * l]).unwrap();
        let axis = &eta.axes[0];
        let x = t * l;
        prop_assert!(axis.map.derivative(x) > 0.0);
        prop_assert!((axis.map.value(c * l) - 0.5 * l).abs() <= 1e-12 * l);
        prop_assert!(eta.value([x, 0.0]) >= 0.0);
        prop_assert!(eta.value([x, 0.0]) <= eta.max_norm() * (1.0 + 1e-14));
        prop_assert_eq!(eta.value([0.0, 0.0]), 0.0);
        prop_assert!(eta.value([l, 0.0]).abs() <= 1e-13 * l * l);
    }
}
