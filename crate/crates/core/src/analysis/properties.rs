use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::grid::Field;
use crate::problem::Problem;
use crate::scheme::{random_policy, step_frozen, step_value, terminal_field, SchemeParams};

/// Relative tolerance for ordering violations.
pub const ORDER_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneConfig {
    /// Random ordered field pairs pushed through one frozen and one value step.
    pub trials: usize,
    /// Ordered terminal pairs pushed through full value solves.
    pub comparison_trials: usize,
    pub seed: u64,
}

impl Default for MonotoneConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            comparison_trials: 1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub seed: u64,
    pub trials: usize,
    pub comparison_trials: usize,
    /// `max (F^{a,b}(U) - F^{a,b}(V))` over trials and cells; ≤ 0 means ordered.
    pub frozen_max_violation: f64,
    /// `max (F(U) - F(V))`.
    pub value_max_violation: f64,
    /// `max (V_1 - V_2)` over all levels of the ordered-terminal solves.
    pub comparison_max_violation: f64,
    /// Largest sup-norm seen in any compared field.
    pub scale: f64,
    pub tolerance: f64,
    pub cells_checked: usize,
    pub passed: bool,
}

impl MonotoneReport {
    pub fn max_violation(&self) -> f64 {
        self.frozen_max_violation
            .max(self.value_max_violation)
            .max(self.comparison_max_violation)
    }
}

fn violation(lo: &Field, hi: &Field) -> f64 {
    lo.values()
        .iter()
        .zip(hi.values())
        .fold(f64::NEG_INFINITY, |m, (a, b)| m.max(a - b))
}

/// Randomized monotonicity and comparison trials.
///
/// Trial 0 uses `V = U`, trial 1 `V = U + 1`; the rest draw `U` uniformly in
/// `[-s, s]` with `s = ‖g‖ + ‖c‖T` and add nonnegative increments to about half the cells.
pub fn check_monotone_comparison<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    config: &MonotoneConfig,
) -> Result<MonotoneReport> {
    let lat = params.lattice().clone();
    let n = lat.len();
    let b = problem.bounds();
    let s = (b.terminal_sup + b.cost_sup * params.horizon()).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut frozen = f64::NEG_INFINITY;
    let mut value = f64::NEG_INFINITY;
    let mut scale = 1.0f64;
    let mut cells = 0;
    for trial in 0..config.trials {
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        let v: Vec<f64> = match trial {
            0 => u.clone(),
            1 => u.iter().map(|x| x + 1.0).collect(),
            _ => u
                .iter()
                .map(|&x| {
                    if rng.gen_bool(0.5) {
                        x + rng.gen_range(0.0..s)
                    } else {
                        x
                    }
                })
                .collect(),
        };
        let u = Field::new(lat.clone(), u)?;
        let v = Field::new(lat.clone(), v)?;
        let level = rng.gen_range(1..=params.steps());
        let policy = random_policy(problem, lat.clone(), level, &mut rng);
        let (fu, fv) = (
            step_frozen(problem, params, level, &u, &policy)?,
            step_frozen(problem, params, level, &v, &policy)?,
        );
        let (hu, hv) = (
            step_value(problem, params, level, &u)?,
            step_value(problem, params, level, &v)?,
        );
        frozen = frozen.max(violation(&fu, &fv));
        value = value.max(violation(&hu, &hv));
        for f in [&u, &v, &fu, &fv, &hu, &hv] {
            scale = scale.max(f.sup_norm());
        }
        cells += 2 * n;
    }
    let mut comparison = f64::NEG_INFINITY;
    for _ in 0..config.comparison_trials {
        let g1 = terminal_field(problem, lat.clone())?;
        let bump = rng.gen_range(0.0..s);
        let g2: Vec<f64> = g1
            .values()
            .iter()
            .map(|&x| {
                if rng.gen_bool(0.5) {
                    x + rng.gen_range(0.0..bump)
                } else {
                    x
                }
            })
            .collect();
        let mut lo = g1;
        let mut hi = Field::new(lat.clone(), g2)?;
        comparison = comparison.max(violation(&lo, &hi));
        for k in (1..=params.steps()).rev() {
            lo = step_value(problem, params, k, &lo)?;
            hi = step_value(problem, params, k, &hi)?;
            comparison = comparison.max(violation(&lo, &hi));
            scale = scale.max(lo.sup_norm()).max(hi.sup_norm());
            cells += n;
        }
    }
    let tolerance = ORDER_TOLERANCE * scale;
    let passed = frozen <= tolerance && value <= tolerance && comparison <= tolerance;
    Ok(MonotoneReport {
        seed: config.seed,
        trials: config.trials,
        comparison_trials: config.comparison_trials,
        frozen_max_violation: frozen,
        value_max_violation: value,
        comparison_max_violation: comparison,
        scale,
        tolerance,
        cells_checked: cells,
        passed,
    })
}

/// `-‖g‖ - ‖c‖(T - t) ≤ V(t, ·) ≤ ‖g‖ + ‖c‖(T - t)` on every level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BracketReport {
    /// `max_k (sup |V(t_k)| - (‖g‖ + ‖c‖(T - t_k)))`; ≤ 0 means the bracket holds.
    pub max_excess: f64,
    pub worst_level: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn check_uniform_bound<P: Problem>(
    problem: &P,
    params: &SchemeParams,
    v: &crate::grid::SpaceTimeField,
) -> BracketReport {
    let b = problem.bounds();
    let grid = params.grid();
    let mut max_excess = f64::NEG_INFINITY;
    let mut worst_level = 0;
    for k in 0..=grid.steps() {
        let bound = b.terminal_sup + b.cost_sup * (grid.horizon() - grid.time(k));
        let excess = v.level(k).sup_norm() - bound;
        if excess > max_excess {
            max_excess = excess;
            worst_level = k;
        }
    }
    let tolerance = ORDER_TOLERANCE * (b.terminal_sup + b.cost_sup * grid.horizon()).max(1.0);
    BracketReport {
        max_excess,
        worst_level,
        tolerance,
        passed: max_excess <= tolerance,
    }
}
