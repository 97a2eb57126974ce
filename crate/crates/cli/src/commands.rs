use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use hjpi::analysis::{
    check_bernstein, check_monotone_comparison, check_uniform_bound, nearest_level,
    run_refinement_study, value_source_term, MonotoneConfig, ReferenceBudget, Regime, StudyConfig,
};
use hjpi::grid::Lattice;
use hjpi::pi::{run_policy_iteration, PiConfig};
use hjpi::problem::{hamiltonian_lipschitz_check, Problem};
use hjpi::scheme::{
    select_scheme_params, solve_value, Mode, SchemeConfig, SchemeParams, ViscosityRule,
};

use crate::config::{RegimeName, RunConfig};
use crate::error::CliError;
use crate::output::{num, opt_num, Csv, OutDir};
use crate::registry::build_problem;
use crate::with_problem;

fn scheme_config(cfg: &RunConfig, mode: Mode) -> Result<SchemeConfig, CliError> {
    let s = &cfg.scheme;
    let viscosity = match (s.nu_h, s.nu_factor) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "set at most one of scheme.nu_h and scheme.nu_factor".into(),
            ))
        }
        (Some(nu), None) => ViscosityRule::Fixed(nu),
        (None, Some(n)) => ViscosityRule::Linear(n),
        (None, None) => ViscosityRule::Tight,
    };
    Ok(SchemeConfig {
        mode,
        viscosity,
        cfl_margin: s.cfl_margin,
        tau: s.tau,
    })
}

fn lattice(cfg: &RunConfig) -> Result<Arc<Lattice>, CliError> {
    let d = cfg.problem.dim;
    let n = cfg.cells()?;
    Ok(Arc::new(Lattice::from_box(
        &vec![cfg.grid.length; d],
        &vec![n; d],
    )?))
}

fn params_json(p: &SchemeParams) -> serde_json::Value {
    serde_json::to_value(p).expect("params serialize")
}

fn elapsed(label: &str, start: Instant) {
    eprintln!("{label}: {:.3} s", start.elapsed().as_secs_f64());
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let problem = build_problem(&cfg.problem, cfg.grid.length)?;
    with_problem!(&problem, p => solve(p, cfg, out))
}

fn solve<P: Problem>(p: &P, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let params = select_scheme_params(
        p,
        lattice(cfg)?,
        cfg.grid.horizon,
        &scheme_config(cfg, Mode::ValueOnly)?,
    )?;
    let v = solve_value(p, &params)?;
    let dir = OutDir::create(out)?;
    let d = p.dim();
    let mut header = vec!["t".to_string(), "level".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    header.push("value".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header);
    let times = cfg
        .output
        .snapshots
        .clone()
        .unwrap_or_else(|| vec![0.0, cfg.grid.horizon]);
    let mut levels: Vec<usize> = times.iter().map(|&t| nearest_level(&params, t)).collect();
    levels.dedup();
    let lat = params.lattice();
    for &k in &levels {
        let f = v.level(k);
        let t = params.grid().time(k);
        for cell in 0..lat.len() {
            let x = lat.point(cell);
            let mut row = vec![num(t), k.to_string()];
            row.extend(x[..d].iter().map(|&xi| num(xi)));
            row.push(num(f.get(cell)));
            csv.row(&row);
        }
    }
    dir.csv("solve_snapshots.csv", &csv)?;
    let bracket = check_uniform_bound(p, &params, &v);
    let b = p.bounds();
    dir.json(
        "solve_summary.json",
        &json!({
            "problem": p.name(),
            "dim": d,
            "horizon": cfg.grid.horizon,
            "params": params_json(&params),
            "sup_norm": v.sup_norm(),
            "uniform_bound": b.terminal_sup + b.cost_sup * cfg.grid.horizon,
            "uniform_bound_holds": bracket.passed,
            "snapshot_levels": levels,
        }),
    )?;
    println!(
        "solve {}: K = {}, tau = {:e}, nu_h = {:e}, sup |V| = {:e}",
        p.name(),
        params.steps(),
        params.tau(),
        params.nu_h(),
        v.sup_norm()
    );
    elapsed("solve", start);
    Ok(())
}

pub fn cmd_pi(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let problem = build_problem(&cfg.problem, cfg.grid.length)?;
    with_problem!(&problem, p => pi(p, cfg, out))
}

fn pi_config(cfg: &RunConfig) -> PiConfig {
    PiConfig {
        max_iters: cfg.pi.max_iters,
        abs_tol: cfg.pi.abs_tol,
        initial_policy: (cfg.pi.initial_policy[0], cfg.pi.initial_policy[1]),
    }
}

fn pi<P: Problem>(p: &P, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let params = select_scheme_params(
        p,
        lattice(cfg)?,
        cfg.grid.horizon,
        &scheme_config(cfg, Mode::Pi)?,
    )?;
    let outcome = run_policy_iteration(p, &params, &pi_config(cfg))?;
    let r = &outcome.report;
    let dir = OutDir::create(out)?;
    let mut csv = Csv::new(&["n", "sup_err", "grad_err_max", "ham_res", "log2_bound"]);
    for it in &r.iterations {
        let g = it.grad_err.iter().copied().fold(0.0, f64::max);
        csv.row(&[
            it.n.to_string(),
            num(it.sup_err),
            num(g),
            num(it.ham_res),
            num(it.log2_bound),
        ]);
    }
    dir.csv("pi.csv", &csv)?;
    dir.json(
        "pi_summary.json",
        &json!({
            "problem": p.name(),
            "dim": p.dim(),
            "horizon": cfg.grid.horizon,
            "params": params_json(&params),
            "pi": pi_config(cfg),
            "c1": r.constants.c1,
            "log_c_h": r.constants.log_c_h,
            "c_h": r.constants.c_h,
            "fitted_ratio": r.fitted_ratio,
            "converged": r.converged,
            "iterations": r.iterations.len(),
            "final_sup_err": r.final_sup_err(),
            "oracle_sup_norm": r.oracle_sup_norm,
            "bound_holds": r.bound_holds,
            "gradient_bound_holds": r.gradient_bound_holds,
            "chain_bound_holds": r.chain_bound_holds,
            "pi_difference": r.pi_difference,
        }),
    )?;
    println!(
        "pi {}: {} iterations, final sup_err = {:e}, fitted ratio = {}",
        p.name(),
        r.iterations.len(),
        r.final_sup_err(),
        r.fitted_ratio
            .map(|x| format!("{x:.4}"))
            .unwrap_or_else(|| "n/a".into())
    );
    elapsed("pi", start);
    if !r.converged {
        return Err(CliError::Failed(format!(
            "policy iteration did not reach abs_tol {:e} in {} iterations",
            cfg.pi.abs_tol, cfg.pi.max_iters
        )));
    }
    Ok(())
}

pub fn cmd_study(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let problem = build_problem(&cfg.problem, cfg.grid.length)?;
    with_problem!(&problem, p => study(p, cfg, out))
}

fn study<P: Problem>(p: &P, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let s = cfg.study()?;
    let defaults = ReferenceBudget::default();
    let config = StudyConfig {
        h_list: s.h_list.clone(),
        alpha: s.alpha,
        regime: match s.regime {
            RegimeName::Nondegenerate => Regime::Nondegenerate,
            RegimeName::Degenerate => Regime::Degenerate,
        },
        h_ref: s.h_ref,
        horizon: cfg.grid.horizon,
        cfl_margin: cfg.scheme.cfl_margin,
        budget: ReferenceBudget {
            max_cell_updates: s.max_cell_updates.unwrap_or(defaults.max_cell_updates),
            max_stored_values: s.max_stored_values.unwrap_or(defaults.max_stored_values),
        },
    };
    let r = run_refinement_study(p, &vec![cfg.grid.length; p.dim()], &config)?;
    let dir = OutDir::create(out)?;
    let mut csv = Csv::new(&[
        "kind",
        "h",
        "tau",
        "nu_h",
        "steps",
        "error",
        "order",
        "target",
        "r_squared",
    ]);
    for l in &r.levels {
        csv.row(&[
            "level".to_string(),
            num(l.h),
            num(l.tau),
            num(l.nu_h),
            l.steps.to_string(),
            num(l.error),
            String::new(),
            String::new(),
            String::new(),
        ]);
    }
    csv.row(&[
        if r.exact { "exact" } else { "fit" }.to_string(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        opt_num(r.order()),
        num(r.target_order),
        opt_num(r.fit.as_ref().map(|f| f.r_squared)),
    ]);
    dir.csv("study.csv", &csv)?;
    dir.json(
        "study_summary.json",
        &json!({
            "problem": p.name(),
            "horizon": cfg.grid.horizon,
            "study": r,
        }),
    )?;
    println!(
        "study {} ({:?}): order = {}, target = {:.4}, monotone = {}",
        p.name(),
        r.regime,
        r.order()
            .map(|x| format!("{x:.4}"))
            .unwrap_or_else(|| "exact".into()),
        r.target_order,
        r.monotone
    );
    if !r.monotone {
        eprintln!("warning: errors do not decrease monotonically with h");
    }
    elapsed("study", start);
    Ok(())
}

struct SuiteLine {
    suite: &'static str,
    passed: bool,
    max_violation: f64,
    samples: usize,
    detail: serde_json::Value,
}

pub fn cmd_check(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let problem = build_problem(&cfg.problem, cfg.grid.length)?;
    with_problem!(&problem, p => check(p, cfg, out))
}

fn failed_suite(suite: &'static str, err: hjpi::Error) -> SuiteLine {
    SuiteLine {
        suite,
        passed: false,
        max_violation: f64::NAN,
        samples: 0,
        detail: json!({ "error": err.to_string() }),
    }
}

fn check<P: Problem>(p: &P, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let start = Instant::now();
    let c = &cfg.check;
    let lat = lattice(cfg)?;
    let horizon = cfg.grid.horizon;
    let value_params = select_scheme_params(
        p,
        lat.clone(),
        horizon,
        &scheme_config(cfg, Mode::ValueOnly)?,
    )?;
    let mut lines = Vec::new();

    let mono = check_monotone_comparison(
        p,
        &value_params,
        &MonotoneConfig {
            trials: c.trials,
            comparison_trials: c.comparison_trials,
            seed: c.seed,
        },
    )?;
    let step_violation = mono.frozen_max_violation.max(mono.value_max_violation);
    lines.push(SuiteLine {
        suite: "monotonicity",
        passed: step_violation <= mono.tolerance,
        max_violation: step_violation,
        samples: mono.trials,
        detail: serde_json::to_value(&mono).expect("report serializes"),
    });
    lines.push(SuiteLine {
        suite: "comparison",
        passed: mono.comparison_max_violation <= mono.tolerance,
        max_violation: mono.comparison_max_violation,
        samples: mono.comparison_trials,
        detail: json!({ "tolerance": mono.tolerance }),
    });

    let v = solve_value(p, &value_params)?;
    let bracket = check_uniform_bound(p, &value_params, &v);
    lines.push(SuiteLine {
        suite: "uniform_bound",
        passed: bracket.passed,
        max_violation: bracket.max_excess,
        samples: value_params.steps() + 1,
        detail: serde_json::to_value(&bracket).expect("report serializes"),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let lip = hamiltonian_lipschitz_check(
        p,
        &vec![cfg.grid.length; p.dim()],
        horizon,
        c.lipschitz_radius,
        c.lipschitz_samples,
        &mut rng,
    );
    lines.push(SuiteLine {
        suite: "hamiltonian_lipschitz",
        passed: lip.passed,
        max_violation: lip.max_ratio - 1.0,
        samples: lip.samples,
        detail: serde_json::to_value(&lip).expect("report serializes"),
    });

    match select_scheme_params(p, lat, horizon, &scheme_config(cfg, Mode::Pi)?) {
        Ok(pi_params) => {
            let line = solve_value(p, &pi_params)
                .and_then(|u| {
                    let ell = value_source_term(p, &pi_params, &u)?;
                    check_bernstein(p, &pi_params, &u, &ell)
                })
                .map(|b| SuiteLine {
                    suite: "bernstein",
                    passed: b.passed,
                    max_violation: -b.min_slack,
                    samples: b.cells_checked,
                    detail: serde_json::to_value(&b).expect("report serializes"),
                });
            lines.push(line.unwrap_or_else(|e| failed_suite("bernstein", e)));
            let line = run_policy_iteration(p, &pi_params, &pi_config(cfg)).map(|o| {
                let l = o.report.pi_difference;
                SuiteLine {
                    suite: "pi_difference",
                    passed: l.passed,
                    max_violation: l.max_ratio - 1.0,
                    samples: l.samples,
                    detail: serde_json::to_value(l).expect("report serializes"),
                }
            });
            lines.push(line.unwrap_or_else(|e| failed_suite("pi_difference", e)));
        }
        Err(e) => {
            lines.push(failed_suite("bernstein", e.clone()));
            lines.push(failed_suite("pi_difference", e));
        }
    }

    let dir = OutDir::create(out)?;
    let mut csv = Csv::new(&["suite", "status", "max_violation", "samples", "seed"]);
    let mut summary = serde_json::Map::new();
    for l in &lines {
        let status = if l.passed { "pass" } else { "fail" };
        csv.row(&[
            l.suite.to_string(),
            status.into(),
            num(l.max_violation),
            l.samples.to_string(),
            c.seed.to_string(),
        ]);
        summary.insert(
            l.suite.into(),
            json!({ "status": status, "report": l.detail }),
        );
        println!(
            "{:<22} {status}  max_violation = {:e}  samples = {}",
            l.suite, l.max_violation, l.samples
        );
    }
    dir.csv("check.csv", &csv)?;
    dir.json(
        "check_summary.json",
        &json!({
            "problem": p.name(),
            "seed": c.seed,
            "params": params_json(&value_params),
            "suites": summary,
        }),
    )?;
    elapsed("check", start);
    let failed: Vec<&str> = lines
        .iter()
        .filter(|l| !l.passed)
        .map(|l| l.suite)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "suites failed: {}",
            failed.join(", ")
        )))
    }
}
