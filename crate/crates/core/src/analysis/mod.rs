//! Property checkers, the fine-grid reference, and convergence-order studies.

mod bernstein;
mod properties;
mod reference;
mod study;

pub use bernstein::{
    check_bernstein, value_source_term, BernsteinReport, PRECONDITION_TOLERANCE, SLACK_TOLERANCE,
};
pub use properties::{
    check_monotone_comparison, check_uniform_bound, BracketReport, MonotoneConfig, MonotoneReport,
    ORDER_TOLERANCE,
};
pub use reference::{
    interpolate, nearest_level, nested_distance, ReferenceBudget, ReferenceSolution,
};
pub use study::{
    degenerate_viscosity, least_squares, run_refinement_study, target_order, LinearFit,
    ReferenceCheck, RefinementStudy, Regime, StudyConfig, StudyLevel, EXACT_TOLERANCE,
};

use std::sync::Arc;

use crate::error::Result;
use crate::grid::Lattice;
use crate::problem::Problem;
use crate::scheme::SchemeConfig;

/// Value solve at `lattice`, kept at the levels nearest `query_times`.
pub fn fine_grid_reference<P: Problem>(
    problem: &P,
    lattice: Arc<Lattice>,
    horizon: f64,
    config: &SchemeConfig,
    query_times: &[f64],
    budget: &ReferenceBudget,
) -> Result<ReferenceSolution> {
    ReferenceSolution::compute(problem, lattice, horizon, config, query_times, budget)
}
