use std::sync::Arc;

use hjpi::analysis::*;
use hjpi::grid::{Field, Lattice, SpaceTimeField};
use hjpi::problem::builtin::{
    degenerate_smooth, nondegenerate_smooth, transport_convex, SmoothGameParams, TransportParams,
};
use hjpi::problem::{Bounds, ControlSet, ExampleParams, Problem, SampledProblem};
use hjpi::scheme::{select_scheme_params, solve_value, SchemeConfig, SchemeParams, ViscosityRule};
use hjpi::Error;

fn constant_problem(kappa: f64, sigma: f64, gamma: f64) -> SampledProblem {
    SampledProblem::builder("constant", 1)
        .controls(
            ControlSet::singleton(vec![0.0]).unwrap(),
            ControlSet::singleton(vec![0.0]).unwrap(),
        )
        .cost(Arc::new(move |_, _, _, _| kappa))
        .drift(Arc::new(|_, _, _, _, out| out.fill(0.0)))
        .diffusion(Arc::new(move |_, _, out| out.fill(sigma)))
        .terminal(Arc::new(move |_| gamma))
        .autonomous(true)
        .bounds(Bounds::analytic(
            kappa.abs(),
            0.0,
            vec![0.0],
            vec![sigma],
            vec![sigma],
            gamma.abs(),
            0.0,
            0.0,
        ))
        .build()
        .unwrap()
}

/// `c = f = 0`, `Σ ≡ sigma`, `g = sin(2πx)`.
fn heat_problem(sigma: f64) -> SampledProblem {
    SampledProblem::builder("heat", 1)
        .controls(
            ControlSet::singleton(vec![0.0]).unwrap(),
            ControlSet::singleton(vec![0.0]).unwrap(),
        )
        .cost(Arc::new(|_, _, _, _| 0.0))
        .drift(Arc::new(|_, _, _, _, out| out.fill(0.0)))
        .diffusion(Arc::new(move |_, _, out| out.fill(sigma)))
        .terminal(Arc::new(|x| (2.0 * std::f64::consts::PI * x[0]).sin()))
        .autonomous(true)
        .bounds(Bounds::analytic(
            0.0,
            0.0,
            vec![0.0],
            vec![sigma],
            vec![sigma],
            1.0,
            0.0,
            0.0,
        ))
        .build()
        .unwrap()
}

fn lattice(cells: &[usize]) -> Arc<Lattice> {
    Arc::new(Lattice::new(cells, 1.0 / cells[0] as f64).unwrap())
}

fn pi_params<P: Problem>(p: &P, cells: &[usize], t: f64) -> SchemeParams {
    select_scheme_params(p, lattice(cells), t, &SchemeConfig::pi()).unwrap()
}

fn bernstein_on_solution<P: Problem>(p: &P, params: &SchemeParams) -> BernsteinReport {
    let v = solve_value(p, params).unwrap();
    let ell = value_source_term(p, params, &v).unwrap();
    check_bernstein(p, params, &v, &ell).unwrap()
}

#[test]
fn bernstein_zero_input_has_zero_slack() {
    let p = heat_problem(0.1);
    let params = pi_params(&p, &[16], 0.05);
    let zero = SpaceTimeField::new(
        params.grid().clone(),
        vec![Field::constant(params.lattice().clone(), 0.0).unwrap(); params.steps() + 1],
    )
    .unwrap();
    let r = check_bernstein(&p, &params, &zero, &zero).unwrap();
    assert_eq!(r.min_slack, 0.0);
    assert!(r.passed && r.violations.is_empty());
    assert_eq!(r.cells_checked, params.steps() * 16);
}

#[test]
fn bernstein_heat_solution_has_zero_source() {
    let p = heat_problem(0.1);
    let params = pi_params(&p, &[32], 0.05);
    let v = solve_value(&p, &params).unwrap();
    let ell = value_source_term(&p, &params, &v).unwrap();
    assert_eq!(ell.sup_norm(), 0.0);
    let r = check_bernstein(&p, &params, &v, &ell).unwrap();
    assert!(r.passed, "min slack {}", r.min_slack);
}

#[test]
fn bernstein_holds_on_builtin_solutions() {
    let ex = ExampleParams::new(2, 1.0);
    let cf = ex.closed_form().unwrap();
    assert!(bernstein_on_solution(&cf, &pi_params(&cf, &[16, 16], 0.05)).passed);
    let tr = transport_convex(&TransportParams {
        sigma: 0.05,
        ..TransportParams::new(1, 1.0)
    })
    .unwrap();
    assert!(bernstein_on_solution(&tr, &pi_params(&tr, &[32], 0.05)).passed);
    let nd = nondegenerate_smooth(&SmoothGameParams::nondegenerate(1, 1.0)).unwrap();
    assert!(bernstein_on_solution(&nd, &pi_params(&nd, &[32], 0.05)).passed);
}

/// With `ℓ = 0`, one explicit heat step gives `ℒ(u²) = ½ M Σ_± (D_± u)² - (τ/4)(M Δu)²`,
/// which is negative at the extremum of a sine once `τM/h²` is close to 1, although
/// `d Λ τ ≤ 4h²` holds there.
#[test]
fn bernstein_needs_the_quarter_step_condition() {
    let sigma = 0.1;
    let p = heat_problem(sigma);
    let lat = lattice(&[16]);
    let h = lat.h();
    let tau_req = 0.9 * h * h / sigma;
    let params = select_scheme_params(
        &p,
        lat.clone(),
        0.2,
        &SchemeConfig {
            viscosity: ViscosityRule::Fixed(0.0),
            tau: Some(tau_req),
            ..SchemeConfig::default()
        },
    )
    .unwrap();
    let tau = params.tau();
    assert!(sigma * tau / (h * h) > 0.8 && sigma * tau <= 4.0 * h * h);
    let v = solve_value(&p, &params).unwrap();
    let k = params.steps();
    let (now, before) = (v.level(k), v.level(k - 1));
    let mut min_slack = f64::INFINITY;
    for cell in 0..lat.len() {
        let (u0, u1) = (now.get(cell), before.get(cell));
        let up = now.get(lat.neighbor(cell, 0, true));
        let down = now.get(lat.neighbor(cell, 0, false));
        let lu2 = (u0 * u0 - u1 * u1) / tau
            + 0.5 * sigma * (up * up - 2.0 * u0 * u0 + down * down) / (h * h);
        let energy = ((up - u0) / h).powi(2) + ((u0 - down) / h).powi(2);
        min_slack = min_slack.min(lu2 - 0.25 * sigma * energy);
    }
    assert!(min_slack < -1e-3, "{min_slack}");
    let ell = value_source_term(&p, &params, &v).unwrap();
    assert!(matches!(
        check_bernstein(&p, &params, &v, &ell),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn bernstein_rejects_inconsistent_source() {
    let p = heat_problem(0.1);
    let params = pi_params(&p, &[16], 0.05);
    let v = solve_value(&p, &params).unwrap();
    let wrong = v
        .map_levels(|_, f| Field::constant(f.lattice().clone(), 1.0))
        .unwrap();
    let err = check_bernstein(&p, &params, &v, &wrong).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)), "{err}");
}

#[test]
fn interpolation_is_exact_at_nodes_and_on_constants() {
    let lat = lattice(&[8, 4]);
    let f = Field::from_fn(lat.clone(), |x| x[0] * 3.0 - x[1] * x[1]).unwrap();
    for cell in 0..lat.len() {
        let x = lat.point(cell);
        assert_eq!(interpolate(&f, &x[..2]), f.get(cell));
    }
    let c = Field::constant(lat, 2.5).unwrap();
    for x in [[0.01, 0.3], [0.999, 0.77], [-0.2, 1.4]] {
        assert!((interpolate(&c, &x) - 2.5).abs() <= 1e-15);
    }
}

#[test]
fn interpolation_is_linear_between_nodes_and_wraps() {
    let lat = lattice(&[4]);
    let f = Field::new(lat, vec![0.0, 1.0, 3.0, 7.0]).unwrap();
    assert!((interpolate(&f, &[0.125]) - 0.5).abs() < 1e-15);
    assert!((interpolate(&f, &[0.875]) - 3.5).abs() < 1e-15);
    assert!((interpolate(&f, &[1.25]) - 1.0).abs() < 1e-15);
}

#[test]
fn nested_distance_matches_a_direct_computation() {
    let p = heat_problem(0.1);
    let cfg = SchemeConfig::default();
    let coarse = select_scheme_params(&p, lattice(&[8]), 0.05, &cfg).unwrap();
    let fine = select_scheme_params(&p, lattice(&[16]), 0.05, &cfg).unwrap();
    let (vc, vf) = (
        solve_value(&p, &coarse).unwrap(),
        solve_value(&p, &fine).unwrap(),
    );
    let d = nested_distance(&vc, &vf).unwrap();
    let mut m = 0.0f64;
    for k in 0..=coarse.steps() {
        let kf = ((coarse.grid().time(k) / fine.tau()).round() as usize).min(fine.steps());
        for i in 0..8 {
            m = m.max((vc.level(k).get(i) - vf.level(kf).get(2 * i)).abs());
        }
    }
    assert_eq!(d, m);
    assert!(nested_distance(&vf, &vc).is_err());
}

#[test]
fn reference_stores_only_requested_levels_and_enforces_the_budget() {
    let p = heat_problem(0.1);
    let cfg = SchemeConfig::default();
    let r = ReferenceSolution::compute(
        &p,
        lattice(&[32]),
        0.05,
        &cfg,
        &[0.0, 0.05],
        &ReferenceBudget::default(),
    )
    .unwrap();
    assert_eq!(r.stored_levels(), 2);
    assert!(r.field_at(0.025).is_err() || r.params().steps() <= 2);
    let tiny = ReferenceBudget {
        max_cell_updates: 10,
        ..ReferenceBudget::default()
    };
    let err =
        ReferenceSolution::compute(&p, lattice(&[32]), 0.05, &cfg, &[0.0], &tiny).unwrap_err();
    assert!(matches!(err, Error::Budget(_)), "{err}");
}

#[test]
fn least_squares_recovers_a_line() {
    let x = [0.0, 1.0, 2.0, 3.0];
    let y: Vec<f64> = x.iter().map(|v| 0.5 * v - 2.0).collect();
    let fit = least_squares(&x, &y).unwrap();
    assert!((fit.slope - 0.5).abs() < 1e-14 && (fit.intercept + 2.0).abs() < 1e-14);
    assert!((fit.r_squared - 1.0).abs() < 1e-14);
    assert!(least_squares(&[1.0], &[1.0]).is_none());
}

fn study_config(h_list: Vec<f64>, h_ref: f64, regime: Regime) -> StudyConfig {
    StudyConfig {
        h_list,
        alpha: 0.9,
        regime,
        h_ref,
        horizon: 0.05,
        cfl_margin: 0.9,
        budget: ReferenceBudget::default(),
    }
}

#[test]
fn study_validation() {
    let p = constant_problem(1.0, 0.1, 2.0);
    let cases = [
        study_config(vec![0.25, 0.125], 1.0 / 32.0, Regime::Nondegenerate),
        study_config(vec![0.25, 0.125, 0.1], 1.0 / 40.0, Regime::Nondegenerate),
        study_config(vec![0.25, 0.125, 0.0625], 1.0 / 32.0, Regime::Nondegenerate),
        study_config(vec![0.25, 0.125, 0.0625], 1.0 / 256.0, Regime::Degenerate),
    ];
    for c in &cases {
        assert!(run_refinement_study(&p, &[1.0], c).is_err(), "{c:?}");
    }
    let err = run_refinement_study(&p, &[1.0], &cases[0])
        .unwrap_err()
        .to_string();
    assert!(err.contains("need ≥ 3 levels"), "{err}");
}

#[test]
fn exact_problem_skips_the_fit() {
    let p = constant_problem(1.5, 0.1, -0.5);
    let s = run_refinement_study(
        &p,
        &[1.0],
        &study_config(vec![0.25, 0.125, 0.0625], 1.0 / 64.0, Regime::Nondegenerate),
    )
    .unwrap();
    assert!(s.exact && s.fit.is_none() && s.order().is_none());
    assert!(s.levels.iter().all(|l| l.error <= EXACT_TOLERANCE));
    assert!(s.reference.passed);
    assert_eq!(s.levels.len(), 3);
}

#[test]
fn degenerate_study_uses_the_prescribed_viscosity() {
    let p = degenerate_smooth(&SmoothGameParams::degenerate(1, 1.0)).unwrap();
    let cfg = StudyConfig {
        horizon: 0.01,
        ..study_config(
            vec![0.125, 0.0625, 0.03125],
            1.0 / 128.0,
            Regime::Degenerate,
        )
    };
    let s = run_refinement_study(&p, &[1.0], &cfg).unwrap();
    for l in &s.levels {
        assert_eq!(l.nu_h, degenerate_viscosity(l.h, 0.9));
    }
    assert!((s.target_order - 1.8 / 15.3).abs() < 1e-15);
    assert!(s.order().unwrap() > 0.0);
}

#[test]
fn monotone_trials_pass_and_record_the_seed() {
    let p = ExampleParams::new(1, 1.0).closed_form().unwrap();
    let params = select_scheme_params(&p, lattice(&[32]), 0.1, &SchemeConfig::default()).unwrap();
    let cfg = MonotoneConfig {
        trials: 20,
        comparison_trials: 2,
        seed: 11,
    };
    let r = check_monotone_comparison(&p, &params, &cfg).unwrap();
    assert!(r.passed, "{r:?}");
    assert_eq!(r.seed, 11);
    assert!(r.max_violation() <= r.tolerance);
    // Trial 0 compares U with itself.
    assert!(r.frozen_max_violation >= 0.0 && r.value_max_violation >= 0.0);
    assert_eq!(check_monotone_comparison(&p, &params, &cfg).unwrap(), r);
}

#[test]
fn uniform_bound_holds_on_builtins() {
    let ex = ExampleParams::new(1, 1.0);
    let cf = ex.closed_form().unwrap();
    let params = select_scheme_params(&cf, lattice(&[64]), 0.3, &SchemeConfig::default()).unwrap();
    let v = solve_value(&cf, &params).unwrap();
    assert!(check_uniform_bound(&cf, &params, &v).passed);
    let nd = nondegenerate_smooth(&SmoothGameParams::nondegenerate(1, 1.0)).unwrap();
    let params = select_scheme_params(&nd, lattice(&[32]), 0.2, &SchemeConfig::default()).unwrap();
    let v = solve_value(&nd, &params).unwrap();
    let r = check_uniform_bound(&nd, &params, &v);
    assert!(r.passed && r.max_excess <= 0.0, "{r:?}");
}

#[test]
fn constant_problem_attains_the_bound() {
    let p = constant_problem(1.0, 0.0, 2.0);
    let params = select_scheme_params(
        &p,
        lattice(&[8]),
        0.5,
        &SchemeConfig {
            viscosity: ViscosityRule::Fixed(0.1),
            ..SchemeConfig::default()
        },
    )
    .unwrap();
    let v = solve_value(&p, &params).unwrap();
    let r = check_uniform_bound(&p, &params, &v);
    assert!(r.passed && r.max_excess.abs() <= 1e-12, "{r:?}");
}
