use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, SignedAxis, SpaceTimeField, MAX_DIM};
use crate::problem::Problem;
use crate::scheme::SchemeParams;

/// Relative tolerance on `ℒu = ℓ` before the inequality is audited.
pub const PRECONDITION_TOLERANCE: f64 = 1e-10;

/// Relative tolerance on the slack.
pub const SLACK_TOLERANCE: f64 = 1e-9;

/// Audit of `ℒ(u²) ≥ 2uℓ - 2τℓ² + (λ/4) Σ_{j∈ℰ} |D_j^h u|²` on levels `1..=K`, where
/// `ℒu = (u(t) - u(t-τ))/τ + ½ Σ_i M_i Δ_i^h u(t)` and `M_i = Σ_i + ν_h`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BernsteinReport {
    /// `slack[k-1][cell]` = lhs - rhs at level `k`.
    #[serde(skip)]
    pub slack: Vec<Vec<f64>>,
    pub min_slack: f64,
    /// `(level, cell)` of the minimum.
    pub min_location: (usize, usize),
    /// `(level, cell)` with slack below `-SLACK_TOLERANCE · scale`, in order.
    pub violations: Vec<(usize, usize)>,
    /// `max(1, sup u²) (2/τ + 2dΛ/h²)`.
    pub scale: f64,
    /// `sup |ℒu - ℓ|` found while checking the precondition.
    pub precondition_residual: f64,
    pub cells_checked: usize,
    pub passed: bool,
}

/// `ℓ = -H(t, x, ∇^h V(t))` on levels `1..=K` (level 0 is zero), which makes
/// `ℒV = ℓ` for the output of the value solve.
pub fn value_source_term<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    v: &SpaceTimeField,
) -> Result<SpaceTimeField> {
    let lat = params.lattice().clone();
    let d = lat.dim();
    v.map_levels(|k, field| {
        if k == 0 {
            return Field::constant(lat.clone(), 0.0);
        }
        let t = params.grid().time(k);
        let values = (0..lat.len())
            .into_par_iter()
            .with_min_len(64)
            .map(|cell| {
                let x = lat.point(cell);
                let mut p = [0.0; MAX_DIM];
                field.central_gradient_into(cell, &mut p[..d]);
                -problem.hamiltonian(t, &x[..d], &p[..d])
            })
            .collect();
        Field::new(lat.clone(), values)
    })
}

struct CellEval {
    residual: f64,
    slack: f64,
}

/// Both sides of the inequality at every cell of levels `1..=K`.
///
/// Rejects inputs with `ℒu ≠ ℓ` beyond `PRECONDITION_TOLERANCE · max(1, sup|u|) (2/τ + 2dΛ/h²)`
/// and parameters violating `4 d Λ τ ≤ h²`.
pub fn check_bernstein<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    u: &SpaceTimeField,
    ell: &SpaceTimeField,
) -> Result<BernsteinReport> {
    let grid = params.grid();
    for (name, s) in [("u", u), ("ell", ell)] {
        if s.levels().len() != grid.steps() + 1 || **s.grid().lattice() != **grid.lattice() {
            return Err(Error::GridMismatch(format!(
                "{name} does not live on the scheme grid"
            )));
        }
    }
    let lat = grid.lattice();
    let d = lat.dim();
    let (h, tau, nu) = (params.h(), params.tau(), params.nu_h());
    let (lambda, big) = (params.lambda_h(), params.lambda_max());
    let n3 = 4.0 * d as f64 * big * tau;
    if n3 > h * h {
        return Err(Error::Precondition(format!(
            "4 d Λ τ = {n3:e} exceeds h² = {:e}",
            h * h
        )));
    }
    let op = 2.0 / tau + 2.0 * d as f64 * big / (h * h);
    let sup_u = u.sup_norm();
    let scale_u = sup_u.max(1.0) * op;
    let scale = (sup_u * sup_u).max(1.0) * op;

    let mut slack = Vec::with_capacity(grid.steps());
    let mut residual = 0.0f64;
    let mut min_slack = f64::INFINITY;
    let mut min_location = (1, 0);
    let mut violations = Vec::new();
    for k in 1..=grid.steps() {
        let t = grid.time(k);
        let now = u.level(k);
        let before = u.level(k - 1);
        let l = ell.level(k);
        let evals: Vec<CellEval> = (0..lat.len())
            .into_par_iter()
            .with_min_len(64)
            .map(|cell| {
                let x = lat.point(cell);
                let mut sig = [0.0; MAX_DIM];
                problem.diffusion(t, &x[..d], &mut sig[..d]);
                let (u0, u1) = (now.get(cell), before.get(cell));
                let mut lu = (u0 - u1) / tau;
                let mut lu2 = (u0 * u0 - u1 * u1) / tau;
                for (i, s) in sig.iter().enumerate().take(d) {
                    let m = s + nu;
                    let up = now.get(lat.neighbor(cell, i, true));
                    let down = now.get(lat.neighbor(cell, i, false));
                    lu += 0.5 * m * (up - 2.0 * u0 + down) / (h * h);
                    lu2 += 0.5 * m * (up * up - 2.0 * u0 * u0 + down * down) / (h * h);
                }
                let energy: f64 = SignedAxis::all(d)
                    .map(|j| now.one_sided_diff(cell, j).powi(2))
                    .sum();
                let lv = l.get(cell);
                let rhs = 2.0 * u0 * lv - 2.0 * tau * lv * lv + 0.25 * lambda * energy;
                CellEval {
                    residual: (lu - lv).abs(),
                    slack: lu2 - rhs,
                }
            })
            .collect();
        let mut row = Vec::with_capacity(evals.len());
        for (cell, e) in evals.into_iter().enumerate() {
            residual = residual.max(e.residual);
            if e.slack < min_slack {
                min_slack = e.slack;
                min_location = (k, cell);
            }
            if e.slack < -SLACK_TOLERANCE * scale {
                violations.push((k, cell));
            }
            row.push(e.slack);
        }
        slack.push(row);
    }
    if !(residual <= PRECONDITION_TOLERANCE * scale_u) {
        return Err(Error::Precondition(format!(
            "ℒu = ℓ fails: sup |ℒu - ℓ| = {residual:e} > {:e}",
            PRECONDITION_TOLERANCE * scale_u
        )));
    }
    if slack.is_empty() {
        min_slack = 0.0;
    }
    Ok(BernsteinReport {
        cells_checked: grid.steps() * lat.len(),
        passed: violations.is_empty(),
        slack,
        min_slack,
        min_location,
        violations,
        scale,
        precondition_residual: residual,
    })
}
