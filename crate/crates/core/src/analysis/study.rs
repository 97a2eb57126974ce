use std::sync::Arc;

use serde::Serialize;

use super::reference::{nested_distance, ReferenceBudget, ReferenceSolution};
use crate::error::{Error, Result};
use crate::grid::{Lattice, SpaceTimeField};
use crate::problem::Problem;
use crate::scheme::{
    select_scheme_params, solve_value, Mode, SchemeConfig, SchemeParams, ViscosityRule,
};

/// Errors at or below this on every level mark the study as exact.
pub const EXACT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `inf Σ_i > 0`; run with `ν_h = 0`.
    Nondegenerate,
    /// `Σ_i` touches zero; run with `ν_h = h^{4α/(9+7α)}`.
    Degenerate,
}

/// Rate the theory promises: `α/2` or `2α/(9+7α)`.
pub fn target_order(regime: Regime, alpha: f64) -> f64 {
    match regime {
        Regime::Nondegenerate => alpha / 2.0,
        Regime::Degenerate => 2.0 * alpha / (9.0 + 7.0 * alpha),
    }
}

/// `ν_h = h^{4α/(9+7α)}`.
pub fn degenerate_viscosity(h: f64, alpha: f64) -> f64 {
    h.powf(4.0 * alpha / (9.0 + 7.0 * alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    /// Strictly decreasing by factor 2.
    pub h_list: Vec<f64>,
    pub alpha: f64,
    pub regime: Regime,
    /// At most `min h / 4`, with `min h / h_ref` a power of two.
    pub h_ref: f64,
    pub horizon: f64,
    pub cfl_margin: f64,
    pub budget: ReferenceBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyLevel {
    pub h: f64,
    pub tau: f64,
    pub nu_h: f64,
    pub steps: usize,
    /// Sup-norm distance to the reference over this level's space-time points.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceCheck {
    pub h_ref: f64,
    pub tau: f64,
    pub nu_h: f64,
    pub steps: usize,
    /// Distance between the reference and the same solve at `2 h_ref`.
    pub self_check_distance: f64,
    /// Distance between the two coarsest study solutions.
    pub coarsest_increment: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementStudy {
    pub regime: Regime,
    pub alpha: f64,
    pub target_order: f64,
    pub levels: Vec<StudyLevel>,
    /// Least-squares fit of `ln err` against `ln h`; absent when exact.
    pub fit: Option<LinearFit>,
    pub exact: bool,
    /// Errors strictly decrease as `h` decreases.
    pub monotone: bool,
    pub reference: ReferenceCheck,
}

impl RefinementStudy {
    pub fn order(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.slope)
    }
}

/// Ordinary least squares `y ≈ slope · x + intercept`.
pub fn least_squares(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let m = n as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

fn validate(config: &StudyConfig) -> Result<()> {
    let hs = &config.h_list;
    if hs.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "need ≥ 3 levels in h_list, got {}",
            hs.len()
        )));
    }
    for w in hs.windows(2) {
        if ((w[0] / w[1]) - 2.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "h_list must halve at each level, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let hmin = hs[hs.len() - 1];
    let ratio = hmin / config.h_ref;
    let r = ratio.round();
    if r < 4.0 || (ratio - r).abs() > 1e-9 || !(r as u64).is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "h_ref must be min h / 2^m with m ≥ 2, got min h / h_ref = {ratio}"
        )));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in (0, 1), got {}",
            config.alpha
        )));
    }
    Ok(())
}

fn lattice_for(box_lengths: &[f64], h: f64) -> Result<Arc<Lattice>> {
    let cells = box_lengths
        .iter()
        .map(|&l| {
            let n = l / h;
            let r = n.round();
            if (n - r).abs() > 1e-9 {
                Err(Error::InvalidConfig(format!(
                    "h = {h} does not divide the box length {l}"
                )))
            } else {
                Ok(r as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Arc::new(Lattice::new(&cells, h)?))
}

fn level_config(config: &StudyConfig, h: f64) -> SchemeConfig {
    let viscosity = match config.regime {
        Regime::Nondegenerate => ViscosityRule::Fixed(0.0),
        Regime::Degenerate => ViscosityRule::Fixed(degenerate_viscosity(h, config.alpha)),
    };
    SchemeConfig {
        mode: Mode::ValueOnly,
        viscosity,
        cfl_margin: config.cfl_margin,
        tau: None,
    }
}

/// The reference approximates the viscosity solution itself: no artificial viscosity in
/// the nondegenerate regime, the smallest admissible one otherwise.
fn reference_config(config: &StudyConfig) -> SchemeConfig {
    let viscosity = match config.regime {
        Regime::Nondegenerate => ViscosityRule::Fixed(0.0),
        Regime::Degenerate => ViscosityRule::Tight,
    };
    SchemeConfig {
        mode: Mode::ValueOnly,
        viscosity,
        cfl_margin: config.cfl_margin,
        tau: None,
    }
}

/// Convergence-order study of the value solve against a fine-grid reference.
pub fn run_refinement_study<P: Problem>(
    problem: &P,
    box_lengths: &[f64],
    config: &StudyConfig,
) -> Result<RefinementStudy> {
    validate(config)?;
    let b = problem.bounds();
    match config.regime {
        Regime::Nondegenerate if !(b.sigma_min() > 0.0) => {
            return Err(Error::InvalidConfig(format!(
                "nondegenerate regime needs inf Σ_i > 0, problem {} has {}",
                problem.name(),
                b.sigma_min()
            )))
        }
        Regime::Degenerate if !b.is_degenerate() => {
            return Err(Error::InvalidConfig(format!(
                "degenerate regime needs Σ_i to vanish somewhere, problem {} has inf Σ_i = {}",
                problem.name(),
                b.sigma_min()
            )))
        }
        _ => {}
    }

    // Time steps are chosen as K_0 · 4^j along the dyadic chain (j = 0 for the coarsest
    // study level, up to the reference), so every coarse time level is a reference level.
    let hmin = config.h_list[config.h_list.len() - 1];
    let m = (hmin / config.h_ref).round().log2() as u32;
    let ref_index = config.h_list.len() as u32 - 1 + m;
    let ref_cfg = reference_config(config);
    let mut chain: Vec<(u32, f64, SchemeConfig)> = config
        .h_list
        .iter()
        .enumerate()
        .map(|(j, &h)| (j as u32, h, level_config(config, h)))
        .collect();
    chain.push((ref_index - 1, 2.0 * config.h_ref, ref_cfg.clone()));
    chain.push((ref_index, config.h_ref, ref_cfg.clone()));
    let mut k0 = 1usize;
    for (j, h, cfg) in &chain {
        let p = select_scheme_params(problem, lattice_for(box_lengths, *h)?, config.horizon, cfg)?;
        k0 = k0.max(p.steps().div_ceil(4usize.pow(*j)));
    }
    let with_steps = |cfg: &SchemeConfig, j: u32| {
        let steps = k0 * 4usize.pow(j);
        SchemeConfig {
            tau: Some(config.horizon / steps as f64 * (1.0 + 1e-12)),
            ..cfg.clone()
        }
    };

    let level_params: Vec<SchemeParams> = chain[..config.h_list.len()]
        .iter()
        .map(|(j, h, cfg)| {
            select_scheme_params(
                problem,
                lattice_for(box_lengths, *h)?,
                config.horizon,
                &with_steps(cfg, *j),
            )
        })
        .collect::<Result<_>>()?;
    let times: Vec<f64> = level_params
        .iter()
        .flat_map(|p| (0..=p.steps()).map(move |k| p.grid().time(k)))
        .collect();

    let reference = ReferenceSolution::compute(
        problem,
        lattice_for(box_lengths, config.h_ref)?,
        config.horizon,
        &with_steps(&ref_cfg, ref_index),
        &times,
        &config.budget,
    )?;
    let check = ReferenceSolution::compute(
        problem,
        lattice_for(box_lengths, 2.0 * config.h_ref)?,
        config.horizon,
        &with_steps(&ref_cfg, ref_index - 1),
        &times,
        &config.budget,
    )?;
    let self_check_distance = self_distance(&check, &reference, &times)?;

    let mut levels = Vec::with_capacity(level_params.len());
    let mut first: Option<SpaceTimeField> = None;
    let mut coarsest_increment = f64::NAN;
    for (i, params) in level_params.iter().enumerate() {
        let sol = solve_value(problem, params)?;
        let error = reference.distance(&sol)?;
        levels.push(StudyLevel {
            h: params.h(),
            tau: params.tau(),
            nu_h: params.nu_h(),
            steps: params.steps(),
            error,
        });
        match i {
            0 => first = Some(sol),
            1 => {
                coarsest_increment = nested_distance(first.as_ref().expect("level 0 solved"), &sol)?
            }
            _ => {}
        }
    }
    let passed = self_check_distance < coarsest_increment
        || (coarsest_increment <= EXACT_TOLERANCE && self_check_distance <= EXACT_TOLERANCE);
    if !passed {
        return Err(Error::Precondition(format!(
            "reference self-check failed: |V(h_ref) - V(2 h_ref)| = {self_check_distance:e} is not below the coarsest study increment {coarsest_increment:e}"
        )));
    }
    let rp = reference.params();
    let reference_check = ReferenceCheck {
        h_ref: rp.h(),
        tau: rp.tau(),
        nu_h: rp.nu_h(),
        steps: rp.steps(),
        self_check_distance,
        coarsest_increment,
        passed,
    };

    let exact = levels.iter().all(|l| l.error <= EXACT_TOLERANCE);
    let fit = if exact {
        None
    } else {
        let x: Vec<f64> = levels.iter().map(|l| l.h.ln()).collect();
        let y: Vec<f64> = levels
            .iter()
            .map(|l| l.error.max(f64::MIN_POSITIVE).ln())
            .collect();
        least_squares(&x, &y)
    };
    let monotone = levels.windows(2).all(|w| w[1].error < w[0].error);
    Ok(RefinementStudy {
        regime: config.regime,
        alpha: config.alpha,
        target_order: target_order(config.regime, config.alpha),
        levels,
        fit,
        exact,
        monotone,
        reference: reference_check,
    })
}

/// `sup |coarse - fine|` at the coarse lattice points and the query times.
fn self_distance(
    coarse: &ReferenceSolution,
    fine: &ReferenceSolution,
    times: &[f64],
) -> Result<f64> {
    let lat = coarse.params().lattice();
    let d = lat.dim();
    let mut m = 0.0f64;
    for &t in times {
        let a = coarse.field_at(t)?;
        let b = fine.field_at(t)?;
        for cell in 0..lat.len() {
            let x = lat.point(cell);
            m = m.max((a.get(cell) - super::reference::interpolate(b, &x[..d])).abs());
        }
    }
    Ok(m)
}
