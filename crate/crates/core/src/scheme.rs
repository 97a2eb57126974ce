//! The explicit monotone scheme: parameter selection and certification, the update
//! operators `F_t^{a,b}` and `F_t`, and the backward solvers.
//!
//! Stepping from level `k` to `k - 1` evaluates every coefficient at `t_k`:
//! `V(t-τ) = V + τ L(t,x,∇^h V)(a,b) + (τ/2) Σ_i (Σ_i + ν_h) Δ_i^h V`.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, Lattice, SpaceTimeField, MAX_DIM};
use crate::problem::Problem;

/// Cells per rayon task; keeps per-task overhead small on tiny lattices.
const MIN_CHUNK: usize = 64;

/// Largest time step ever emitted; grids require `tau < 1`.
const TAU_CAP: f64 = 0.5;

/// Relative bump applied to the tight viscosity so rounding cannot push a weight below zero.
const NU_BUMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ValueOnly,
    /// Also enforce the smallness conditions needed by policy iteration.
    Pi,
}

/// How the artificial viscosity `ν_h` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum ViscosityRule {
    /// Smallest value meeting `ν_h + Σ_i ≥ h|f_i|` on the grid, divided by the CFL margin.
    Tight,
    /// `ν_h = N h`.
    Linear(f64),
    /// A given `ν_h`.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub mode: Mode,
    pub viscosity: ViscosityRule,
    /// Safety factor in `(0, 1]` applied to every time-step bound.
    pub cfl_margin: f64,
    /// Requested time step; it is rounded down so `T / tau` is an integer, then certified.
    pub tau: Option<f64>,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ValueOnly,
            viscosity: ViscosityRule::Tight,
            cfl_margin: 0.9,
            tau: None,
        }
    }
}

impl SchemeConfig {
    pub fn pi() -> Self {
        Self {
            mode: Mode::Pi,
            ..Self::default()
        }
    }
}

/// `lhs ≤ rhs`, with both sides kept for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Inequality {
    pub lhs: f64,
    pub rhs: f64,
}

impl Inequality {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

/// Result of evaluating the scheme conditions on every grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    /// Time levels evaluated (one for autonomous problems).
    pub levels_checked: usize,
    pub cells_checked: usize,
    /// `min (Σ_i + ν_h - h max_{a,b}|f_i|)` over cells, levels and axes.
    pub diffusion_slack: f64,
    /// `d ν_h + sup Σ_i Σ_i ≤ h² / τ`.
    pub cfl: Inequality,
    /// `4 d Λ_h τ ≤ h²`, the form the Bernstein estimate actually uses; PI mode only.
    pub bernstein: Option<Inequality>,
    /// `d τ max_i ‖Σ_i‖ ≤ 4h²`; PI mode only.
    pub pi_diffusion: Option<Inequality>,
    /// `96 τ max{‖c‖², 2d‖f‖²} ≤ λ_h`; PI mode only.
    pub pi_smallness: Option<Inequality>,
}

/// Admissible scheme parameters on a concrete space-time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeParams {
    #[serde(skip)]
    grid: Grid,
    h: f64,
    tau: f64,
    steps: usize,
    nu_h: f64,
    lambda_h: f64,
    lambda_max: f64,
    cfl_margin: f64,
    mode: Mode,
    viscosity: ViscosityRule,
    certificate: Certificate,
}

impl SchemeParams {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        self.grid.lattice()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    pub fn nu_h(&self) -> f64 {
        self.nu_h
    }

    /// `λ_h = min_i inf Σ_i + ν_h`.
    pub fn lambda_h(&self) -> f64 {
        self.lambda_h
    }

    /// `Λ_h = max_i sup Σ_i + ν_h`.
    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn cfl_margin(&self) -> f64 {
        self.cfl_margin
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn viscosity(&self) -> ViscosityRule {
        self.viscosity
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }
}

/// Extremes of the coefficients over the scanned cells.
#[derive(Debug, Clone, Copy)]
struct Scan {
    /// `max (h max|f_i| - Σ_i)` and where it occurs.
    tight_nu: (f64, usize, usize, usize),
    sum_sigma_max: f64,
    sigma_max: f64,
    sigma_min: f64,
}

impl Scan {
    fn merge(a: Scan, b: Scan) -> Scan {
        // ties keep the earlier (level, cell, axis) so reports do not depend on scheduling
        let tight_nu = if b.tight_nu.0 > a.tight_nu.0
            || (b.tight_nu.0 == a.tight_nu.0
                && (b.tight_nu.1, b.tight_nu.2) < (a.tight_nu.1, a.tight_nu.2))
        {
            b.tight_nu
        } else {
            a.tight_nu
        };
        Scan {
            tight_nu,
            sum_sigma_max: a.sum_sigma_max.max(b.sum_sigma_max),
            sigma_max: a.sigma_max.max(b.sigma_max),
            sigma_min: a.sigma_min.min(b.sigma_min),
        }
    }

    fn empty() -> Scan {
        Scan {
            tight_nu: (f64::NEG_INFINITY, usize::MAX, usize::MAX, usize::MAX),
            sum_sigma_max: f64::NEG_INFINITY,
            sigma_max: f64::NEG_INFINITY,
            sigma_min: f64::INFINITY,
        }
    }
}

fn scan_coefficients<P: Problem>(
    problem: &P,
    lattice: &Lattice,
    times: &[(usize, f64)],
) -> Result<Scan> {
    let d = lattice.dim();
    let h = lattice.h();
    let mut scan = Scan::empty();
    for &(level, t) in times {
        let s = (0..lattice.len())
            .into_par_iter()
            .with_min_len(MIN_CHUNK)
            .map(|cell| {
                let x = lattice.point(cell);
                let mut sig = [0.0; MAX_DIM];
                let mut fmax = [0.0; MAX_DIM];
                problem.diffusion(t, &x[..d], &mut sig[..d]);
                problem.drift_axis_max(t, &x[..d], &mut fmax[..d]);
                let mut out = Scan::empty();
                let mut sum = 0.0;
                for i in 0..d {
                    let gap = h * fmax[i] - sig[i];
                    if gap > out.tight_nu.0 || !gap.is_finite() {
                        out.tight_nu = (gap, level, cell, i);
                    }
                    sum += sig[i];
                    out.sigma_max = out.sigma_max.max(sig[i]);
                    out.sigma_min = out.sigma_min.min(sig[i]);
                    if sig[i] < 0.0 || !sig[i].is_finite() {
                        out.sigma_min = f64::NEG_INFINITY;
                    }
                }
                out.sum_sigma_max = sum;
                out
            })
            .reduce(Scan::empty, Scan::merge);
        scan = Scan::merge(scan, s);
    }
    if !(scan.sigma_min >= 0.0) || !scan.tight_nu.0.is_finite() || !scan.sum_sigma_max.is_finite() {
        return Err(Error::InvalidProblem(
            "diffusion must be finite and nonnegative, drift finite, on every grid cell".into(),
        ));
    }
    Ok(scan)
}

fn scan_times(autonomous: bool, grid: Option<&Grid>, horizon: f64) -> Vec<(usize, f64)> {
    if autonomous {
        return vec![(0, 0.0)];
    }
    match grid {
        Some(g) => (0..=g.steps()).map(|k| (k, g.time(k))).collect(),
        None => (0..=64).map(|k| (k, horizon * k as f64 / 64.0)).collect(),
    }
}

fn fmt_point(lattice: &Lattice, cell: usize) -> String {
    let x = lattice.point(cell);
    format!("{:?}", &x[..lattice.dim()])
}

/// Chooses `ν_h` and `τ` and certifies the scheme conditions on every grid cell.
///
/// `τ = margin · h² / (d ν_h + sup Σ_i Σ_i)`, capped in PI mode by
/// `margin · 4h² / (d Λ_h)`, `margin · 4h² / (d max‖Σ_i‖)` and
/// `margin · λ_h / (96 max{‖c‖², 2d‖f‖²})`, then rounded down so `T / τ` is an integer.
/// Violations of any condition are hard errors carrying the numbers.
pub fn select_scheme_params<P: Problem>(
    problem: &P,
    lattice: Arc<Lattice>,
    horizon: f64,
    config: &SchemeConfig,
) -> Result<SchemeParams> {
    if problem.dim() != lattice.dim() {
        return Err(Error::GridMismatch(format!(
            "problem has dimension {}, lattice {}",
            problem.dim(),
            lattice.dim()
        )));
    }
    if !(config.cfl_margin > 0.0 && config.cfl_margin <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "cfl_margin must lie in (0, 1], got {}",
            config.cfl_margin
        )));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let autonomous = problem.is_autonomous();
    let mut scan = scan_coefficients(problem, &lattice, &scan_times(autonomous, None, horizon))?;
    // A non-autonomous problem is rescanned on the final levels until the extremes settle.
    for _ in 0..3 {
        let (grid, nu, lambda, lambda_max) = choose(problem, &lattice, horizon, config, &scan)?;
        if autonomous {
            return certify(problem, grid, nu, lambda, lambda_max, config, &scan, 1);
        }
        let times = scan_times(false, Some(&grid), horizon);
        let full = scan_coefficients(problem, &lattice, &times)?;
        let merged = Scan::merge(scan, full);
        let settled = merged.tight_nu.0 <= scan.tight_nu.0
            && merged.sum_sigma_max <= scan.sum_sigma_max
            && merged.sigma_max <= scan.sigma_max
            && merged.sigma_min >= scan.sigma_min;
        if settled {
            return certify(
                problem,
                grid,
                nu,
                lambda,
                lambda_max,
                config,
                &full,
                times.len(),
            );
        }
        scan = merged;
    }
    let (grid, nu, lambda, lambda_max) = choose(problem, &lattice, horizon, config, &scan)?;
    let times = scan_times(false, Some(&grid), horizon);
    let full = scan_coefficients(problem, &lattice, &times)?;
    certify(
        problem,
        grid,
        nu,
        lambda,
        lambda_max,
        config,
        &full,
        times.len(),
    )
}

fn choose<P: Problem>(
    problem: &P,
    lattice: &Arc<Lattice>,
    horizon: f64,
    config: &SchemeConfig,
    scan: &Scan,
) -> Result<(Grid, f64, f64, f64)> {
    let d = lattice.dim() as f64;
    let h = lattice.h();
    let margin = config.cfl_margin;
    let nu = match config.viscosity {
        ViscosityRule::Tight => (scan.tight_nu.0.max(0.0) * (1.0 + NU_BUMP)) / margin,
        ViscosityRule::Linear(n) => n * h,
        ViscosityRule::Fixed(v) => v,
    };
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "artificial viscosity must be nonnegative, got {nu}"
        )));
    }
    let b = problem.bounds();
    let lambda = scan.sigma_min.min(b.sigma_min()) + nu;
    let lambda_max = scan.sigma_max.max(b.sigma_max()) + nu;
    if config.mode == Mode::Pi && !(lambda > 0.0) {
        return Err(Error::Infeasible {
            condition: "(N4) second line",
            detail: format!(
                "PI requires positive λ^h, got λ^h = {lambda:e} (ν_h = {nu:e}, inf Σ = {:e})",
                lambda - nu
            ),
        });
    }
    let tau_max = match config.tau {
        Some(tau) => tau,
        None => {
            let mut tau = TAU_CAP.min(horizon);
            let denom = d * nu + scan.sum_sigma_max;
            if denom > 0.0 {
                tau = tau.min(margin * h * h / denom);
            }
            if config.mode == Mode::Pi {
                if lambda_max > 0.0 {
                    tau = tau.min(margin * h * h / (4.0 * d * lambda_max));
                }
                let smax = scan.sigma_max.max(b.sigma_max());
                if smax > 0.0 {
                    tau = tau.min(margin * 4.0 * h * h / (d * smax));
                }
                let growth = smallness_constant(problem);
                if growth > 0.0 {
                    tau = tau.min(margin * lambda / (96.0 * growth));
                }
            }
            tau
        }
    };
    let grid = Grid::new(lattice.clone(), horizon, tau_max)?;
    Ok((grid, nu, lambda, lambda_max))
}

/// `max{‖c‖², 2d‖f‖²}`.
pub(crate) fn smallness_constant<P: Problem>(problem: &P) -> f64 {
    let b = problem.bounds();
    let d = problem.dim() as f64;
    (b.cost_sup * b.cost_sup).max(2.0 * d * b.drift_sup * b.drift_sup)
}

#[allow(clippy::too_many_arguments)]
fn certify<P: Problem>(
    problem: &P,
    grid: Grid,
    nu: f64,
    lambda: f64,
    lambda_max: f64,
    config: &SchemeConfig,
    scan: &Scan,
    levels_checked: usize,
) -> Result<SchemeParams> {
    let lattice = grid.lattice().clone();
    let d = lattice.dim() as f64;
    let h = lattice.h();
    let tau = grid.tau();
    let (gap, level, cell, axis) = scan.tight_nu;
    let diffusion_slack = nu - gap;
    if diffusion_slack < 0.0 {
        return Err(Error::Infeasible {
            condition: "(N2) first line",
            detail: format!(
                "ν_h + Σ_i ≥ h|f_i| fails at level {level}, x = {}, axis {}: ν_h = {nu:e}, h max|f_i| - Σ_i = {gap:e}",
                fmt_point(&lattice, cell),
                axis + 1
            ),
        });
    }
    let cfl = Inequality {
        lhs: d * nu + scan.sum_sigma_max,
        rhs: h * h / tau,
    };
    if !cfl.holds() {
        return Err(Error::Infeasible {
            condition: "(N2) second line",
            detail: format!(
                "d ν_h + sup Σ_i Σ_i = {:e} > h²/τ = {:e} (h = {h:e}, τ = {tau:e})",
                cfl.lhs, cfl.rhs
            ),
        });
    }
    let (mut bernstein, mut pi_diffusion, mut pi_smallness) = (None, None, None);
    if config.mode == Mode::Pi {
        let b3 = Inequality {
            lhs: 4.0 * d * lambda_max * tau,
            rhs: h * h,
        };
        if !b3.holds() {
            return Err(Error::Infeasible {
                condition: "(N3)",
                detail: format!("4 d Λ_h τ = {:e} > h² = {:e}", b3.lhs, b3.rhs),
            });
        }
        let smax = scan.sigma_max.max(problem.bounds().sigma_max());
        let n4a = Inequality {
            lhs: d * tau * smax,
            rhs: 4.0 * h * h,
        };
        if !n4a.holds() {
            return Err(Error::Infeasible {
                condition: "(N4) first line",
                detail: format!("d τ max‖Σ_i‖ = {:e} > 4h² = {:e}", n4a.lhs, n4a.rhs),
            });
        }
        let n4b = Inequality {
            lhs: 96.0 * tau * smallness_constant(problem),
            rhs: lambda,
        };
        if !n4b.holds() {
            return Err(Error::Infeasible {
                condition: "(N4) second line",
                detail: format!(
                    "96 τ max{{‖c‖², 2d‖f‖²}} = {:e} > λ_h = {:e} (τ = {tau:e})",
                    n4b.lhs, n4b.rhs
                ),
            });
        }
        bernstein = Some(b3);
        pi_diffusion = Some(n4a);
        pi_smallness = Some(n4b);
    }
    Ok(SchemeParams {
        h,
        tau,
        steps: grid.steps(),
        grid,
        nu_h: nu,
        lambda_h: lambda,
        lambda_max,
        cfl_margin: config.cfl_margin,
        mode: config.mode,
        viscosity: config.viscosity,
        certificate: Certificate {
            levels_checked,
            cells_checked: lattice.len(),
            diffusion_slack,
            cfl,
            bernstein,
            pi_diffusion,
            pi_smallness,
        },
    })
}

/// Coefficients of the update as an affine combination of neighbour values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilWeights {
    dim: usize,
    pub center: f64,
    pub plus: [f64; MAX_DIM],
    pub minus: [f64; MAX_DIM],
    /// `τ c`.
    pub source: f64,
}

impl StencilWeights {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `center U(x) + Σ_i (plus_i U(x+he_i) + minus_i U(x-he_i)) + τ c`.
    pub fn apply(&self, field: &Field, cell: usize) -> f64 {
        let lat = field.lattice();
        let mut acc = self.center * field.get(cell);
        for i in 0..self.dim {
            acc += self.plus[i] * field.get(lat.neighbor(cell, i, true));
            acc += self.minus[i] * field.get(lat.neighbor(cell, i, false));
        }
        acc + self.source
    }
}

/// Update weights at `(t, x)` for the pair at `(a_index, b_index)`.
pub fn stencil_weights<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    t: f64,
    x: &[f64],
    a_index: usize,
    b_index: usize,
) -> Result<StencilWeights> {
    let u = problem.control_at(a_index, b_index)?;
    stencil_weights_for(problem, params, t, x, &u)
}

/// Update weights at `(t, x)` for a given control pair.
pub fn stencil_weights_for<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    t: f64,
    x: &[f64],
    u: &P::Control,
) -> Result<StencilWeights> {
    let d = problem.dim();
    let (h, tau, nu) = (params.h, params.tau, params.nu_h);
    let mut f = [0.0; MAX_DIM];
    let mut s = [0.0; MAX_DIM];
    problem.drift(t, x, u, &mut f[..d]);
    problem.diffusion(t, x, &mut s[..d]);
    let k = tau / (2.0 * h * h);
    let mut w = StencilWeights {
        dim: d,
        center: 1.0,
        plus: [0.0; MAX_DIM],
        minus: [0.0; MAX_DIM],
        source: tau * problem.cost(t, x, u),
    };
    let mut msum = 0.0;
    for i in 0..d {
        let m = s[i] + nu;
        msum += m;
        w.plus[i] = k * (h * f[i] + m);
        w.minus[i] = k * (m - h * f[i]);
    }
    w.center = 1.0 - tau / (h * h) * msum;
    let negative = std::iter::once(("center", 0, w.center))
        .chain((0..d).map(|i| ("plus", i, w.plus[i])))
        .chain((0..d).map(|i| ("minus", i, w.minus[i])))
        .find(|(_, _, v)| *v < 0.0);
    if let Some((which, i, v)) = negative {
        let lat = params.lattice();
        let cell = nearest_cell(lat, x);
        return Err(Error::MonotonicityViolated {
            cell,
            detail: format!(
                "{which} weight{} = {v:e} at t = {t}, x = {x:?}",
                if which == "center" {
                    String::new()
                } else {
                    format!(" on axis {}", i + 1)
                }
            ),
        });
    }
    Ok(w)
}

fn nearest_cell(lattice: &Lattice, x: &[f64]) -> usize {
    let mut multi = [0usize; MAX_DIM];
    for (i, m) in multi.iter_mut().enumerate().take(lattice.dim()) {
        let n = lattice.cells()[i] as f64;
        *m = ((x[i] / lattice.h()).round().rem_euclid(n)) as usize;
    }
    lattice.flat_index(&multi[..lattice.dim()])
}

/// Per-cell control pairs used when stepping from `level` to `level - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField<C> {
    lattice: Arc<Lattice>,
    level: usize,
    controls: Vec<C>,
}

impl<C: Copy> PolicyField<C> {
    pub fn new(lattice: Arc<Lattice>, level: usize, controls: Vec<C>) -> Result<Self> {
        if controls.len() != lattice.len() {
            return Err(Error::GridMismatch(format!(
                "{} controls for a lattice of {} cells",
                controls.len(),
                lattice.len()
            )));
        }
        Ok(Self {
            lattice,
            level,
            controls,
        })
    }

    pub fn constant(lattice: Arc<Lattice>, level: usize, control: C) -> Self {
        let n = lattice.len();
        Self {
            lattice,
            level,
            controls: vec![control; n],
        }
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn level(&self) -> usize {
        self.level
    }

    #[inline]
    pub fn get(&self, cell: usize) -> C {
        self.controls[cell]
    }

    pub fn controls(&self) -> &[C] {
        &self.controls
    }
}

/// A policy with an independently drawn control pair in every cell.
pub fn random_policy<P: Problem, R: Rng>(
    problem: &P,
    lattice: Arc<Lattice>,
    level: usize,
    rng: &mut R,
) -> PolicyField<P::Control> {
    let controls = (0..lattice.len())
        .map(|_| problem.random_control(rng))
        .collect();
    PolicyField {
        lattice,
        level,
        controls,
    }
}

fn check_level(params: &SchemeParams, level: usize) -> Result<()> {
    if level == 0 || level > params.steps {
        return Err(Error::GridMismatch(format!(
            "cannot step from level {level}; valid levels are 1..={}",
            params.steps
        )));
    }
    Ok(())
}

fn check_field(params: &SchemeParams, field: &Field) -> Result<()> {
    if **field.lattice() != **params.lattice() {
        return Err(Error::GridMismatch(format!(
            "field on lattice {:?}, scheme on {:?}",
            field.lattice().cells(),
            params.lattice().cells()
        )));
    }
    Ok(())
}

/// `U + τ ℓ + (τ/2) Σ_i (Σ_i + ν_h) Δ_i U` at one cell, for a given first-order term `ℓ`.
#[inline]
fn update_cell<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    t: f64,
    x: &[f64],
    field: &Field,
    cell: usize,
    ell: f64,
) -> f64 {
    let d = x.len();
    let mut s = [0.0; MAX_DIM];
    problem.diffusion(t, x, &mut s[..d]);
    let mut diff = 0.0;
    for i in 0..d {
        diff += (s[i] + params.nu_h) * field.second_diff(cell, i);
    }
    field.get(cell) + params.tau * ell + 0.5 * params.tau * diff
}

fn finish(params: &SchemeParams, level: usize, values: Vec<f64>) -> Result<Field> {
    if let Some((cell, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NumericFailure { level, cell, value });
    }
    Ok(Field::from_vec_unchecked(params.lattice().clone(), values))
}

/// `F_t^{a,b}`: one backward step from `level` with the policy frozen cellwise.
pub fn step_frozen<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    level: usize,
    field: &Field,
    policy: &PolicyField<P::Control>,
) -> Result<Field> {
    check_level(params, level)?;
    check_field(params, field)?;
    if *policy.lattice != **params.lattice() {
        return Err(Error::GridMismatch(
            "policy lives on a different lattice".into(),
        ));
    }
    let t = params.grid.time(level);
    let lat = params.lattice();
    let d = lat.dim();
    let values: Vec<f64> = (0..lat.len())
        .into_par_iter()
        .with_min_len(MIN_CHUNK)
        .map(|cell| {
            let x = lat.point(cell);
            let mut p = [0.0; MAX_DIM];
            field.central_gradient_into(cell, &mut p[..d]);
            let ell = problem.lagrangian(t, &x[..d], &p[..d], &policy.controls[cell]);
            update_cell(problem, params, t, &x[..d], field, cell, ell)
        })
        .collect();
    finish(params, level - 1, values)
}

/// `F_t`: one backward step from `level` with the Hamiltonian.
pub fn step_value<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    level: usize,
    field: &Field,
) -> Result<Field> {
    check_level(params, level)?;
    check_field(params, field)?;
    let t = params.grid.time(level);
    let lat = params.lattice();
    let d = lat.dim();
    let values: Vec<f64> = (0..lat.len())
        .into_par_iter()
        .with_min_len(MIN_CHUNK)
        .map(|cell| {
            let x = lat.point(cell);
            let mut p = [0.0; MAX_DIM];
            field.central_gradient_into(cell, &mut p[..d]);
            let ell = problem.best_response(t, &x[..d], &p[..d]).value;
            update_cell(problem, params, t, &x[..d], field, cell, ell)
        })
        .collect();
    finish(params, level - 1, values)
}

/// Best response to `∇^h field` in every cell, at the time of `level`.
pub fn improve_policy<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    level: usize,
    field: &Field,
) -> Result<PolicyField<P::Control>> {
    check_field(params, field)?;
    if level > params.steps {
        return Err(Error::GridMismatch(format!(
            "level {level} exceeds {}",
            params.steps
        )));
    }
    let t = params.grid.time(level);
    let lat = params.lattice();
    let d = lat.dim();
    let controls = (0..lat.len())
        .into_par_iter()
        .with_min_len(MIN_CHUNK)
        .map(|cell| {
            let x = lat.point(cell);
            let mut p = [0.0; MAX_DIM];
            field.central_gradient_into(cell, &mut p[..d]);
            problem.best_response(t, &x[..d], &p[..d]).control
        })
        .collect();
    Ok(PolicyField {
        lattice: lat.clone(),
        level,
        controls,
    })
}

/// Terminal data `g` on the lattice.
pub fn terminal_field<P: Problem>(problem: &P, lattice: Arc<Lattice>) -> Result<Field> {
    Field::from_fn(lattice, |x| problem.terminal(x))
}

/// Backward solve of the value equation from `V(T) = g`.
pub fn solve_value<P: Problem>(problem: &P, params: &SchemeParams) -> Result<SpaceTimeField> {
    let g = terminal_field(problem, params.lattice().clone())?;
    solve_value_from(problem, params, g)
}

/// Backward solve of the value equation from the given terminal field.
pub fn solve_value_from<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    terminal: Field,
) -> Result<SpaceTimeField> {
    let mut levels = Vec::with_capacity(params.steps + 1);
    solve_value_streaming(problem, params, terminal, |_, f| {
        levels.push(f.clone());
        Ok(())
    })?;
    levels.reverse();
    SpaceTimeField::new(params.grid.clone(), levels)
}

/// Backward solve that hands each level to `visit` (from `K` down to `0`) without storing it.
pub fn solve_value_streaming<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    terminal: Field,
    mut visit: impl FnMut(usize, &Field) -> Result<()>,
) -> Result<()> {
    check_field(params, &terminal)?;
    let mut current = terminal;
    visit(params.steps, &current)?;
    for k in (1..=params.steps).rev() {
        current = step_value(problem, params, k, &current)?;
        visit(k - 1, &current)?;
    }
    Ok(())
}

/// Policy evaluation: backward solve with `policies[k-1]` used when stepping from level `k`.
pub fn solve_frozen<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    policies: &[PolicyField<P::Control>],
) -> Result<SpaceTimeField> {
    if policies.len() != params.steps {
        return Err(Error::GridMismatch(format!(
            "{} policy levels for {} steps",
            policies.len(),
            params.steps
        )));
    }
    if let Some(k) = policies
        .iter()
        .enumerate()
        .position(|(k, p)| p.level != k + 1)
    {
        return Err(Error::GridMismatch(format!(
            "policy {k} is tagged with level {}, expected {}",
            policies[k].level,
            k + 1
        )));
    }
    let mut levels = Vec::with_capacity(params.steps + 1);
    let mut current = terminal_field(problem, params.lattice().clone())?;
    for k in (1..=params.steps).rev() {
        let next = step_frozen(problem, params, k, &current, &policies[k - 1])?;
        levels.push(std::mem::replace(&mut current, next));
    }
    levels.push(current);
    levels.reverse();
    SpaceTimeField::new(params.grid.clone(), levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Bounds, ControlSet, ExampleParams, SampledProblem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `c ≡ kappa`, `f ≡ drift`, `Σ ≡ sigma`, `g ≡ gamma`, singleton controls.
    fn constant_problem(
        d: usize,
        kappa: f64,
        drift: f64,
        sigma: f64,
        gamma: f64,
    ) -> SampledProblem {
        let fsup = drift.abs() * (d as f64).sqrt();
        SampledProblem::builder("constant", d)
            .controls(
                ControlSet::singleton(vec![0.0]).unwrap(),
                ControlSet::singleton(vec![0.0]).unwrap(),
            )
            .cost(Arc::new(move |_, _, _, _| kappa))
            .drift(Arc::new(move |_, _, _, _, out| out.fill(drift)))
            .diffusion(Arc::new(move |_, _, out| out.fill(sigma)))
            .terminal(Arc::new(move |_| gamma))
            .autonomous(true)
            .bounds(Bounds::analytic(
                kappa.abs(),
                fsup,
                vec![drift.abs(); d],
                vec![sigma; d],
                vec![sigma; d],
                gamma.abs(),
                0.0,
                0.0,
            ))
            .build()
            .unwrap()
    }

    fn lattice(cells: &[usize], h: f64) -> Arc<Lattice> {
        Arc::new(Lattice::new(cells, h).unwrap())
    }

    fn params_with(
        p: &SampledProblem,
        lat: Arc<Lattice>,
        horizon: f64,
        nu: f64,
        tau: f64,
    ) -> SchemeParams {
        select_scheme_params(
            p,
            lat,
            horizon,
            &SchemeConfig {
                viscosity: ViscosityRule::Fixed(nu),
                cfl_margin: 1.0,
                tau: Some(tau),
                ..SchemeConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn tight_viscosity_is_forced_by_drift() {
        let p = constant_problem(1, 0.0, 1.0, 0.0, 0.0);
        let params = select_scheme_params(
            &p,
            lattice(&[10], 0.1),
            1.0,
            &SchemeConfig {
                cfl_margin: 1.0,
                ..SchemeConfig::default()
            },
        )
        .unwrap();
        assert!(params.nu_h() >= 0.1);
        assert!(params.nu_h() < 0.1 * (1.0 + 1e-9));
        // tau ≤ h² / (d ν_h)
        assert!(params.tau() <= 0.01 / params.nu_h());
    }

    #[test]
    fn cfl_bound_for_fixed_viscosity() {
        let p = constant_problem(1, 0.0, 0.0, 0.0, 0.0);
        let cfg = SchemeConfig {
            viscosity: ViscosityRule::Fixed(0.1),
            cfl_margin: 1.0,
            ..SchemeConfig::default()
        };
        let params = select_scheme_params(&p, lattice(&[10], 0.1), 1.0, &cfg).unwrap();
        assert!(params.tau() <= 0.1 + 1e-15);
        assert_eq!(params.steps(), 10);
    }

    #[test]
    fn pi_mode_needs_positive_lambda() {
        let p = constant_problem(1, 1.0, 0.0, 0.0, 0.0);
        let cfg = SchemeConfig {
            mode: Mode::Pi,
            viscosity: ViscosityRule::Fixed(0.0),
            ..SchemeConfig::default()
        };
        let err = select_scheme_params(&p, lattice(&[10], 0.1), 1.0, &cfg).unwrap_err();
        assert!(
            err.to_string().contains("PI requires positive λ^h"),
            "{err}"
        );
    }

    #[test]
    fn oversized_tau_reports_the_inequality() {
        let p = constant_problem(1, 0.0, 0.0, 0.0, 0.0);
        let cfg = SchemeConfig {
            viscosity: ViscosityRule::Fixed(1.0),
            tau: Some(0.5),
            ..SchemeConfig::default()
        };
        let err = select_scheme_params(&p, lattice(&[10], 0.1), 1.0, &cfg).unwrap_err();
        match err {
            Error::Infeasible { condition, detail } => {
                assert_eq!(condition, "(N2) second line");
                assert!(detail.contains("h²/τ"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn paper_example_pi_params_satisfy_conditions() {
        let p = ExampleParams::new(2, 1.0).closed_form().unwrap();
        let lat = lattice(&[20, 20], 0.05);
        let params = select_scheme_params(&p, lat, 0.1, &SchemeConfig::pi()).unwrap();
        let (h, tau, nu) = (params.h(), params.tau(), params.nu_h());
        let b = p.bounds();
        // Σ ≡ 0, |f_i| ≤ 1
        assert!(nu >= h);
        assert!(2.0 * nu <= h * h / tau);
        assert!(2.0 * tau * b.sigma_max() <= 4.0 * h * h);
        let growth = (b.cost_sup.powi(2)).max(4.0 * b.drift_sup.powi(2));
        assert!(96.0 * tau * growth <= nu);
        assert!((params.horizon() / tau - params.steps() as f64).abs() < 1e-9);
    }

    #[test]
    fn extreme_cfl_weights() {
        // f ≡ 0, Σ ≡ 0, ν τ d = h²
        let p = constant_problem(1, 0.0, 0.0, 0.0, 0.0);
        let params = params_with(&p, lattice(&[4], 0.5), 1.0, 1.0, 0.25);
        let w = stencil_weights(&p, &params, 0.0, &[0.0], 0, 0).unwrap();
        assert_eq!(w.center, 0.0);
        assert_eq!(w.plus[0], 0.5);
        assert_eq!(w.minus[0], 0.5);
    }

    #[test]
    fn heat_step_by_hand() {
        // 4 cells, τ = 0.25; h = 0.5 with ν = 0.25 gives the same τν/(2h²) as h = 1, ν = 1.
        let p = constant_problem(1, 0.0, 0.0, 0.0, 0.0);
        let lat = lattice(&[4], 0.5);
        let params = params_with(&p, lat.clone(), 1.0, 0.25, 0.25);
        let u = Field::new(lat.clone(), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let pol = PolicyField::constant(lat, 1, p.control_at(0, 0).unwrap());
        let v = step_frozen(&p, &params, 4, &u, &PolicyField { level: 4, ..pol }).unwrap();
        // (τ/2) ν Δ = 0.125 · 0.25 · (±2 / 0.25)
        assert_eq!(v.values(), &[0.25, 0.75, 0.25, 0.75]);
    }

    #[test]
    fn constant_cost_shifts_by_tau_kappa() {
        let p = constant_problem(2, 0.7, 0.0, 0.0, 3.0);
        let lat = lattice(&[4, 5], 0.2);
        let params = params_with(&p, lat.clone(), 1.0, 0.0, 0.01);
        let u = Field::constant(lat, 3.0).unwrap();
        let v = step_value(&p, &params, 5, &u).unwrap();
        for &x in v.values() {
            assert!((x - (3.0 + 0.01 * 0.7)).abs() < 1e-15);
        }
        let sol = solve_value(&p, &params).unwrap();
        for k in 0..=params.steps() {
            let expect = 3.0 + 0.7 * (1.0 - params.grid().time(k));
            for &x in sol.level(k).values() {
                assert!((x - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn paper_example_flat_field_gains_tau() {
        let mut ep = ExampleParams::new(2, 1.0);
        ep.potential = 0.0;
        let p = ep.closed_form().unwrap();
        let lat = lattice(&[8, 8], 0.125);
        let params = select_scheme_params(&p, lat.clone(), 0.5, &SchemeConfig::default()).unwrap();
        let u = Field::constant(lat, 2.0).unwrap();
        let v = step_value(&p, &params, params.steps(), &u).unwrap();
        for &x in v.values() {
            assert_eq!(x, 2.0 + params.tau());
        }
    }

    #[test]
    fn weights_reproduce_the_direct_update() {
        let p = ExampleParams::new(2, 1.0).sampled().unwrap();
        let lat = lattice(&[8, 8], 0.125);
        let params = select_scheme_params(&p, lat.clone(), 0.3, &SchemeConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Field::new(
            lat.clone(),
            (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let k = params.steps();
        let pol = random_policy(&p, lat.clone(), k, &mut rng);
        let v = step_frozen(&p, &params, k, &u, &pol).unwrap();
        let t = params.grid().time(k);
        for cell in 0..lat.len() {
            let x = lat.point(cell);
            let w = stencil_weights_for(&p, &params, t, &x[..2], &pol.get(cell)).unwrap();
            assert!(w.center >= 0.0 && w.plus.iter().chain(&w.minus).all(|&v| v >= 0.0));
            let direct = v.get(cell);
            assert!((w.apply(&u, cell) - direct).abs() <= 1e-14 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn value_step_equals_frozen_step_with_improved_policy() {
        let p = ExampleParams::new(2, 1.0).sampled().unwrap();
        let lat = lattice(&[6, 6], 1.0 / 6.0);
        let params = select_scheme_params(&p, lat.clone(), 0.2, &SchemeConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Field::new(lat, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let k = params.steps();
        let pol = improve_policy(&p, &params, k, &u).unwrap();
        assert_eq!(
            step_value(&p, &params, k, &u).unwrap(),
            step_frozen(&p, &params, k, &u, &pol).unwrap()
        );
    }

    #[test]
    fn single_step_solve_by_hand() {
        let p = constant_problem(1, 0.5, 0.0, 0.0, 0.0);
        let lat = lattice(&[4], 0.5);
        let params = params_with(&p, lat.clone(), 0.25, 0.5, 0.25);
        assert_eq!(params.steps(), 1);
        let pol = vec![PolicyField::constant(
            lat.clone(),
            1,
            p.control_at(0, 0).unwrap(),
        )];
        let sol = solve_frozen(&p, &params, &pol).unwrap();
        let w = stencil_weights(&p, &params, params.horizon(), &[0.0], 0, 0).unwrap();
        let g = sol.level(1);
        assert_eq!(sol.level(0).get(0), w.apply(g, 0));
    }

    #[test]
    fn solve_frozen_with_own_best_responses_matches_solve_value() {
        let p = ExampleParams::new(1, 1.0).sampled().unwrap();
        let lat = lattice(&[16], 1.0 / 16.0);
        let params = select_scheme_params(&p, lat, 0.05, &SchemeConfig::default()).unwrap();
        let v = solve_value(&p, &params).unwrap();
        let policies: Vec<_> = (1..=params.steps())
            .map(|k| improve_policy(&p, &params, k, v.level(k)).unwrap())
            .collect();
        assert_eq!(solve_frozen(&p, &params, &policies).unwrap(), v);
    }

    #[test]
    fn level_checks() {
        let p = constant_problem(1, 0.0, 0.0, 0.0, 0.0);
        let lat = lattice(&[4], 0.5);
        let params = params_with(&p, lat.clone(), 1.0, 0.1, 0.25);
        let u = Field::constant(lat, 1.0).unwrap();
        assert!(step_value(&p, &params, 0, &u).is_err());
        assert!(step_value(&p, &params, 5, &u).is_err());
        let other = Field::constant(lattice(&[5], 0.5), 1.0).unwrap();
        assert!(step_value(&p, &params, 1, &other).is_err());
    }
}
