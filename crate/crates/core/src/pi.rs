//! Policy iteration on the discrete scheme, measured against the directly solved
//! fixed point `V*`.
//!
//! Iterate `n` evaluates `V_n` with policies `π_n`; `π_{n+1}` at level `k` is the
//! best response to `∇^h V_n(t_k)`. The initial policy is a constant index pair.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, SignedAxis, SpaceTimeField, MAX_DIM};
use crate::problem::{norm, Problem};
use crate::scheme::{
    self, improve_policy, smallness_constant, step_frozen, terminal_field, Mode, SchemeParams,
};

pub use crate::scheme::PolicyField;

/// Ratios above `1 + RATIO_TOLERANCE` count as violations of a sampled bound.
pub const RATIO_TOLERANCE: f64 = 1e-9;

/// Residuals below this are treated as zero where the bound itself is zero.
pub const ZERO_TOLERANCE: f64 = 1e-12;

/// Errors at or below this are excluded from the bound check and the ratio fit.
pub const BOUND_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiConfig {
    /// Maximum number of improvement steps; iterates `0..=max_iters` may be evaluated.
    pub max_iters: usize,
    /// Stop once `sup |V_n - V*| < abs_tol`.
    pub abs_tol: f64,
    /// `(a_index, b_index)` used everywhere by `π_0`.
    pub initial_policy: (usize, usize),
}

impl Default for PiConfig {
    fn default() -> Self {
        Self {
            max_iters: 60,
            abs_tol: 1e-12,
            initial_policy: (0, 0),
        }
    }
}

impl PiConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.abs_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "abs_tol must be positive, got {}",
                self.abs_tol
            )));
        }
        Ok(())
    }
}

/// `C_1 = 48 max{‖c‖², 2d‖f‖²}` and `C_h = e^{C_1 T/λ_h} (12‖g‖² + T λ_h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceConstants {
    pub c1: f64,
    /// `ln C_h`; always finite.
    pub log_c_h: f64,
    /// `C_h` when representable.
    pub c_h: Option<f64>,
}

impl ConvergenceConstants {
    /// `log2 (C_h 2^{-n-1})`.
    pub fn log2_bound(&self, n: usize) -> f64 {
        self.log_c_h / std::f64::consts::LN_2 - (n as f64 + 1.0)
    }

    /// `err² ≤ C_h 2^{-n-1}`, compared in log space.
    pub fn bound_holds(&self, n: usize, err: f64) -> bool {
        err <= 0.0 || 2.0 * err.log2() <= self.log2_bound(n)
    }
}

pub fn convergence_constants<P: Problem>(
    problem: &P,
    params: &SchemeParams,
) -> Result<ConvergenceConstants> {
    let lambda = params.lambda_h();
    if !(lambda > 0.0) {
        return Err(Error::Precondition(format!(
            "λ^h must be positive, got {lambda}"
        )));
    }
    let t = params.horizon();
    let g = problem.bounds().terminal_sup;
    let c1 = 48.0 * smallness_constant(problem);
    let log_c_h = c1 * t / lambda + (12.0 * g * g + t * lambda).ln();
    let c_h = Some(log_c_h.exp()).filter(|v| v.is_finite() && *v <= 1e308);
    Ok(ConvergenceConstants { c1, log_c_h, c_h })
}

/// Sampled check of `|L(∇^h V_n)(π_n) - H(∇^h V*)| ≤ ‖f‖ (|∇^h u_n| + |∇^h u_{n-1}|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PiDifferenceReport {
    pub samples: usize,
    /// Largest lhs/rhs over cells with `rhs > ZERO_TOLERANCE`.
    pub max_ratio: f64,
    /// Cells with `rhs ≤ ZERO_TOLERANCE` but `lhs > ZERO_TOLERANCE`.
    pub zero_bound_violations: usize,
    /// Largest lhs over `‖f‖ (|∇^h u_n| + 2|∇^h u_{n-1}|)`, the bound the triangle
    /// inequality actually delivers.
    pub corrected_max_ratio: f64,
    pub passed: bool,
}

impl PiDifferenceReport {
    fn empty() -> Self {
        Self {
            samples: 0,
            max_ratio: 0.0,
            zero_bound_violations: 0,
            corrected_max_ratio: 0.0,
            passed: true,
        }
    }

    fn merge(mut self, o: Self) -> Self {
        self.samples += o.samples;
        self.max_ratio = self.max_ratio.max(o.max_ratio);
        self.zero_bound_violations += o.zero_bound_violations;
        self.corrected_max_ratio = self.corrected_max_ratio.max(o.corrected_max_ratio);
        self.passed = self.max_ratio <= 1.0 + RATIO_TOLERANCE && self.zero_bound_violations == 0;
        self
    }

    fn sample(lhs: f64, rhs: f64, corrected_rhs: f64) -> Self {
        let mut r = Self::empty();
        r.samples = 1;
        // a bound at rounding level is treated as zero
        if rhs > ZERO_TOLERANCE {
            r.max_ratio = lhs / rhs;
        } else if lhs > ZERO_TOLERANCE {
            r.zero_bound_violations = 1;
        }
        if corrected_rhs > ZERO_TOLERANCE {
            r.corrected_max_ratio = lhs / corrected_rhs;
        }
        r.merge(Self::empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub n: usize,
    /// `sup |V_n - V*|`.
    pub sup_err: f64,
    /// `sup |D_i^h (V_n - V*)|` per axis.
    pub grad_err: Vec<f64>,
    /// `sup |L(∇^h V*)(π_n) - H(∇^h V*)|`.
    pub ham_res: f64,
    /// `sup 2‖f‖ (|∇^h u_n| + |∇^h u_{n-1}|)`; absent for `n = 0`.
    pub ham_chain_bound: Option<f64>,
    /// `log2 (C_h 2^{-n-1})`.
    pub log2_bound: f64,
    /// Policy-difference ratio over this iterate; absent for `n = 0`.
    pub pi_difference: Option<PiDifferenceReport>,
    /// The residual bound holds cell by cell, not only in sup.
    pub chain_pointwise_holds: bool,
    /// Cells whose policy differs from the previous iterate's.
    pub policy_changes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiReport {
    pub iterations: Vec<IterationRecord>,
    pub constants: ConvergenceConstants,
    pub converged: bool,
    /// `exp` of the least-squares slope of `ln sup_err` over the decaying segment.
    pub fitted_ratio: Option<f64>,
    /// `sup_err[n]² ≤ C_h 2^{-n-1}` for every `n ≥ 1` with `sup_err[n] > BOUND_FLOOR`.
    pub bound_holds: bool,
    /// `grad_err[n][i] ≤ (2/h) sup_err[n] + 1e-12` at every iterate.
    pub gradient_bound_holds: bool,
    /// `ham_res[n] ≤ (1 + 1e-9) ham_chain_bound[n]` at every `n ≥ 1`.
    pub chain_bound_holds: bool,
    pub pi_difference: PiDifferenceReport,
    pub oracle_sup_norm: f64,
}

impl PiReport {
    pub fn final_sup_err(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.sup_err)
    }
}

pub struct PiOutcome<C> {
    pub report: PiReport,
    pub value: SpaceTimeField,
    pub oracle: SpaceTimeField,
    /// Policies of the last evaluated iterate, `policies[k-1]` at level `k`.
    pub policies: Vec<PolicyField<C>>,
}

/// Per-cell Hamiltonian of `V*` on levels `1..=K`.
fn oracle_hamiltonians<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    vstar: &SpaceTimeField,
) -> Vec<Vec<f64>> {
    let lat = params.lattice();
    let d = lat.dim();
    (1..=params.steps())
        .map(|k| {
            let t = params.grid().time(k);
            let v = vstar.level(k);
            (0..lat.len())
                .into_par_iter()
                .with_min_len(64)
                .map(|cell| {
                    let x = lat.point(cell);
                    let mut p = [0.0; MAX_DIM];
                    v.central_gradient_into(cell, &mut p[..d]);
                    problem.hamiltonian(t, &x[..d], &p[..d])
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct LevelDiag {
    ham_res: f64,
    chain: f64,
    chain_ok: bool,
    difference: PiDifferenceReport,
    changes: usize,
}

/// Diagnostics at level `k` for `V_n`, `π_n`, and optionally `V_{n-1}`.
#[allow(clippy::too_many_arguments)]
fn level_diagnostics<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    k: usize,
    vn: &Field,
    vprev: Option<&Field>,
    vstar: &Field,
    hstar: &[f64],
    policy: &PolicyField<P::Control>,
    prev_policy: Option<&PolicyField<P::Control>>,
) -> LevelDiag {
    let lat = params.lattice();
    let d = lat.dim();
    let t = params.grid().time(k);
    let fsup = problem.bounds().drift_sup;
    (0..lat.len())
        .into_par_iter()
        .with_min_len(64)
        .map(|cell| {
            let x = lat.point(cell);
            let x = &x[..d];
            let u = policy.get(cell);
            let mut ps = [0.0; MAX_DIM];
            vstar.central_gradient_into(cell, &mut ps[..d]);
            let res = (problem.lagrangian(t, x, &ps[..d], &u) - hstar[cell]).abs();
            let mut out = LevelDiag {
                ham_res: res,
                chain: 0.0,
                chain_ok: true,
                difference: PiDifferenceReport::empty(),
                changes: usize::from(prev_policy.is_some_and(|q| q.get(cell) != u)),
            };
            if let Some(vp) = vprev {
                let mut pn = [0.0; MAX_DIM];
                let mut pp = [0.0; MAX_DIM];
                vn.central_gradient_into(cell, &mut pn[..d]);
                vp.central_gradient_into(cell, &mut pp[..d]);
                let mut un = [0.0; MAX_DIM];
                let mut up = [0.0; MAX_DIM];
                for i in 0..d {
                    un[i] = pn[i] - ps[i];
                    up[i] = pp[i] - ps[i];
                }
                let (gn, gp) = (norm(&un[..d]), norm(&up[..d]));
                let grads = gn + gp;
                let lhs = (problem.lagrangian(t, x, &pn[..d], &u) - hstar[cell]).abs();
                out.difference =
                    PiDifferenceReport::sample(lhs, fsup * grads, fsup * (gn + 2.0 * gp));
                out.chain = 2.0 * fsup * grads;
                out.chain_ok = res <= out.chain * (1.0 + RATIO_TOLERANCE) || res <= ZERO_TOLERANCE;
            }
            out
        })
        .reduce(
            || LevelDiag {
                ham_res: 0.0,
                chain: 0.0,
                chain_ok: true,
                difference: PiDifferenceReport::empty(),
                changes: 0,
            },
            |a, b| LevelDiag {
                ham_res: a.ham_res.max(b.ham_res),
                chain: a.chain.max(b.chain),
                chain_ok: a.chain_ok && b.chain_ok,
                difference: a.difference.merge(b.difference),
                changes: a.changes + b.changes,
            },
        )
}

/// Policy-difference estimate over whole trajectories; `policies_n[k-1]` is `π_n` at level `k`.
pub fn pi_difference_check<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    v_n: &SpaceTimeField,
    v_prev: &SpaceTimeField,
    v_star: &SpaceTimeField,
    policies_n: &[PolicyField<P::Control>],
) -> Result<PiDifferenceReport> {
    if policies_n.len() != params.steps() {
        return Err(Error::GridMismatch(format!(
            "{} policy levels for {} steps",
            policies_n.len(),
            params.steps()
        )));
    }
    for s in [v_n, v_prev, v_star] {
        if s.levels().len() != params.steps() + 1 || **s.grid().lattice() != **params.lattice() {
            return Err(Error::GridMismatch(
                "trajectory does not match the scheme grid".into(),
            ));
        }
    }
    let hstar = oracle_hamiltonians(problem, params, v_star);
    let mut report = PiDifferenceReport::empty();
    for k in 1..=params.steps() {
        let diag = level_diagnostics(
            problem,
            params,
            k,
            v_n.level(k),
            Some(v_prev.level(k)),
            v_star.level(k),
            &hstar[k - 1],
            &policies_n[k - 1],
            None,
        );
        report = report.merge(diag.difference);
    }
    Ok(report)
}

/// `sup |u|` and per-axis `sup |D_i^h u|` for `u = V_n - V*`.
fn error_norms(vn: &SpaceTimeField, vstar: &SpaceTimeField) -> Result<(f64, Vec<f64>)> {
    let d = vn.grid().dim();
    let mut sup = 0.0f64;
    let mut grad = vec![0.0f64; d];
    for (a, b) in vn.levels().iter().zip(vstar.levels()) {
        let u = a.sub(b)?;
        sup = sup.max(u.sup_norm());
        for (i, g) in grad.iter_mut().enumerate() {
            let j = SignedAxis::plus(i);
            for cell in 0..u.values().len() {
                *g = g.max(u.one_sided_diff(cell, j).abs());
            }
        }
    }
    Ok((sup, grad))
}

/// Least-squares slope of `ln err` against `n` from the peak to the last error above `floor`.
pub fn fitted_ratio(errors: &[f64], floor: f64) -> Option<f64> {
    let peak = errors
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |m, (i, &e)| match m {
            Some((_, v)) if v >= e => m,
            _ => Some((i, e)),
        })?
        .0;
    let pts: Vec<(f64, f64)> = errors[peak..]
        .iter()
        .enumerate()
        .take_while(|(_, &e)| e > floor)
        .map(|(i, &e)| ((peak + i) as f64, e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| {
        (a + (x - mx) * (y - my), b + (x - mx) * (x - mx))
    });
    Some((sxy / sxx).exp())
}

/// Runs policy iteration until `sup |V_n - V*| < abs_tol` or `max_iters` improvements.
pub fn run_policy_iteration<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    config: &PiConfig,
) -> Result<PiOutcome<P::Control>> {
    config.validate()?;
    if params.mode() != Mode::Pi {
        return Err(Error::Precondition(
            "scheme parameters were not certified for policy iteration".into(),
        ));
    }
    let (a0, b0) = config.initial_policy;
    let initial = problem.control_at(a0, b0)?;
    let constants = convergence_constants(problem, params)?;
    let vstar = scheme::solve_value(problem, params)?;
    let hstar = oracle_hamiltonians(problem, params, &vstar);
    let lat = params.lattice().clone();
    let steps = params.steps();
    let h = params.h();

    let mut iterations = Vec::new();
    let mut difference_total = PiDifferenceReport::empty();
    let mut prev: Option<(SpaceTimeField, Vec<PolicyField<P::Control>>)> = None;
    let mut converged = false;
    for n in 0..=config.max_iters {
        let mut levels = Vec::with_capacity(steps + 1);
        let mut policies = Vec::with_capacity(steps);
        let mut current = terminal_field(problem, lat.clone())?;
        let mut ham_res = 0.0f64;
        let mut chain = 0.0f64;
        let mut chain_ok = true;
        let mut difference = PiDifferenceReport::empty();
        let mut changes = 0;
        for k in (1..=steps).rev() {
            let policy = match &prev {
                None => PolicyField::constant(lat.clone(), k, initial),
                Some((vp, _)) => improve_policy(problem, params, k, vp.level(k))?,
            };
            let diag = level_diagnostics(
                problem,
                params,
                k,
                &current,
                prev.as_ref().map(|(vp, _)| vp.level(k)),
                vstar.level(k),
                &hstar[k - 1],
                &policy,
                prev.as_ref().map(|(_, pp)| &pp[k - 1]),
            );
            ham_res = ham_res.max(diag.ham_res);
            chain = chain.max(diag.chain);
            chain_ok &= diag.chain_ok;
            difference = difference.merge(diag.difference);
            changes += diag.changes;
            let next = step_frozen(problem, params, k, &current, &policy)?;
            levels.push(std::mem::replace(&mut current, next));
            policies.push(policy);
        }
        levels.push(current);
        levels.reverse();
        policies.reverse();
        let vn = SpaceTimeField::new(params.grid().clone(), levels)?;
        let (sup_err, grad_err) = error_norms(&vn, &vstar)?;
        let has_prev = prev.is_some();
        if has_prev {
            difference_total = difference_total.merge(difference);
        }
        iterations.push(IterationRecord {
            n,
            sup_err,
            grad_err,
            ham_res,
            ham_chain_bound: has_prev.then_some(chain),
            log2_bound: constants.log2_bound(n),
            pi_difference: has_prev.then_some(difference),
            chain_pointwise_holds: chain_ok,
            policy_changes: changes,
        });
        prev = Some((vn, policies));
        if sup_err < config.abs_tol {
            converged = true;
            break;
        }
    }

    let errors: Vec<f64> = iterations.iter().map(|r| r.sup_err).collect();
    let scale = vstar.sup_norm().max(1.0);
    let bound_holds = iterations
        .iter()
        .filter(|r| r.n >= 1 && r.sup_err > BOUND_FLOOR)
        .all(|r| constants.bound_holds(r.n, r.sup_err));
    let gradient_bound_holds = iterations
        .iter()
        .all(|r| r.grad_err.iter().all(|&g| g <= 2.0 / h * r.sup_err + 1e-12));
    let chain_bound_holds = iterations.iter().all(|r| {
        r.chain_pointwise_holds
            && match r.ham_chain_bound {
                Some(b) => r.ham_res <= b * (1.0 + RATIO_TOLERANCE) || r.ham_res <= ZERO_TOLERANCE,
                None => true,
            }
    });
    let (value, policies) = prev.expect("at least one iterate is evaluated");
    Ok(PiOutcome {
        report: PiReport {
            fitted_ratio: fitted_ratio(&errors, 1e-13 * scale),
            iterations,
            constants,
            converged,
            bound_holds,
            gradient_bound_holds,
            chain_bound_holds,
            pi_difference: difference_total,
            oracle_sup_norm: vstar.sup_norm(),
        },
        value,
        oracle: vstar,
        policies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Lattice;
    use crate::problem::{Bounds, ControlSet, ExampleParams, SampledProblem};
    use crate::scheme::{select_scheme_params, solve_frozen, SchemeConfig};
    use std::sync::Arc;

    #[test]
    fn c1_examples() {
        let p = SampledProblem::builder("k", 1)
            .controls(
                ControlSet::singleton(vec![0.0]).unwrap(),
                ControlSet::singleton(vec![0.0]).unwrap(),
            )
            .cost(Arc::new(|_, _, _, _| 1.0))
            .drift(Arc::new(|_, _, _, _, o| o.fill(1.0)))
            .diffusion(Arc::new(|_, _, o| o.fill(0.0)))
            .terminal(Arc::new(|_| 0.0))
            .autonomous(true)
            .bounds(Bounds::analytic(
                1.0,
                1.0,
                vec![1.0],
                vec![0.0],
                vec![0.0],
                0.0,
                0.0,
                0.0,
            ))
            .build()
            .unwrap();
        let lat = Arc::new(Lattice::new(&[10], 0.1).unwrap());
        let params = select_scheme_params(&p, lat, 0.1, &SchemeConfig::pi()).unwrap();
        let c = convergence_constants(&p, &params).unwrap();
        assert_eq!(c.c1, 96.0);
        let lam = params.lambda_h();
        let expect = 96.0 * 0.1 / lam + (0.1 * lam).ln();
        assert!((c.log_c_h - expect).abs() < 1e-12 * expect.abs());
    }

    #[test]
    fn log_space_bound() {
        let c = ConvergenceConstants {
            c1: 1.0,
            log_c_h: 2000.0,
            c_h: None,
        };
        assert!(c.bound_holds(5, 1e100));
        let small = ConvergenceConstants {
            c1: 0.0,
            log_c_h: 0.0,
            c_h: Some(1.0),
        };
        // 1 · 2^{-2} = 0.25 at n = 1
        assert!(small.bound_holds(1, 0.5));
        assert!(!small.bound_holds(1, 0.5000001));
    }

    #[test]
    fn ratio_fit_on_geometric_data() {
        let e: Vec<f64> = (0..10).map(|n| 0.3 * 0.5f64.powi(n)).collect();
        assert!((fitted_ratio(&e, 1e-13).unwrap() - 0.5).abs() < 1e-12);
        let with_peak = [0.1, 0.4, 0.2, 0.1, 0.05, 0.0];
        assert!((fitted_ratio(&with_peak, 1e-13).unwrap() - 0.5).abs() < 1e-12);
        assert!(fitted_ratio(&[1.0], 1e-13).is_none());
    }

    #[test]
    fn pi_iterates_match_policy_evaluation() {
        let p = ExampleParams::new(1, 1.0).sampled().unwrap();
        let lat = Arc::new(Lattice::new(&[16], 1.0 / 16.0).unwrap());
        let params = select_scheme_params(&p, lat, 0.02, &SchemeConfig::pi()).unwrap();
        let cfg = PiConfig {
            max_iters: 2,
            ..PiConfig::default()
        };
        let out = run_policy_iteration(&p, &params, &cfg).unwrap();
        let again = solve_frozen(&p, &params, &out.policies).unwrap();
        assert_eq!(again, out.value);
    }

    #[test]
    fn refuses_value_only_params() {
        let p = ExampleParams::new(1, 1.0).closed_form().unwrap();
        let lat = Arc::new(Lattice::new(&[16], 1.0 / 16.0).unwrap());
        let params = select_scheme_params(&p, lat, 0.02, &SchemeConfig::default()).unwrap();
        assert!(run_policy_iteration(&p, &params, &PiConfig::default()).is_err());
    }
}
