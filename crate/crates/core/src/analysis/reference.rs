use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, Lattice, SpaceTimeField, MAX_DIM};
use crate::problem::Problem;
use crate::scheme::{
    select_scheme_params, solve_value_streaming, terminal_field, SchemeConfig, SchemeParams,
};

/// Limits on the size of a reference solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceBudget {
    /// `K · cells` of the fine solve.
    pub max_cell_updates: u64,
    /// Values kept in memory for interpolation.
    pub max_stored_values: u64,
}

impl Default for ReferenceBudget {
    fn default() -> Self {
        Self {
            max_cell_updates: 4_000_000_000,
            max_stored_values: 200_000_000,
        }
    }
}

/// A fine-grid value solve, kept only at the levels nearest the requested times, with
/// multilinear periodic interpolation in space and nearest-level lookup in time.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    params: SchemeParams,
    levels: BTreeMap<usize, Field>,
}

impl ReferenceSolution {
    pub fn compute<P: Problem>(
        problem: &P,
        lattice: Arc<Lattice>,
        horizon: f64,
        config: &SchemeConfig,
        query_times: &[f64],
        budget: &ReferenceBudget,
    ) -> Result<Self> {
        let params = select_scheme_params(problem, lattice.clone(), horizon, config)?;
        let cells = lattice.len() as u64;
        let updates = params.steps() as u64 * cells;
        if updates > budget.max_cell_updates {
            return Err(Error::Budget(format!(
                "reference solve needs {} steps × {cells} cells = {updates} cell updates, budget is {}",
                params.steps(),
                budget.max_cell_updates
            )));
        }
        let mut wanted: Vec<usize> = query_times
            .iter()
            .map(|&t| nearest_level(&params, t))
            .collect();
        wanted.sort_unstable();
        wanted.dedup();
        let stored = wanted.len() as u64 * cells;
        if stored > budget.max_stored_values {
            return Err(Error::Budget(format!(
                "reference keeps {} levels × {cells} cells = {stored} values, budget is {}",
                wanted.len(),
                budget.max_stored_values
            )));
        }
        let mut levels = BTreeMap::new();
        let g = terminal_field(problem, lattice)?;
        solve_value_streaming(problem, &params, g, |k, f| {
            if wanted.binary_search(&k).is_ok() {
                levels.insert(k, f.clone());
            }
            Ok(())
        })?;
        Ok(Self { params, levels })
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn stored_levels(&self) -> usize {
        self.levels.len()
    }

    /// The stored fine field nearest to time `t`.
    pub fn field_at(&self, t: f64) -> Result<&Field> {
        let k = nearest_level(&self.params, t);
        self.levels.get(&k).ok_or_else(|| {
            Error::Precondition(format!("reference level {k} (t = {t}) was not stored"))
        })
    }

    pub fn value_at(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(interpolate(self.field_at(t)?, x))
    }

    /// `sup |coarse - reference|` over every level and cell of `coarse`.
    pub fn distance(&self, coarse: &SpaceTimeField) -> Result<f64> {
        let grid = coarse.grid();
        let lat = grid.lattice();
        let d = lat.dim();
        if d != self.params.lattice().dim() {
            return Err(Error::GridMismatch(
                "reference and solution differ in dimension".into(),
            ));
        }
        let mut m = 0.0f64;
        for k in 0..=grid.steps() {
            let fine = self.field_at(grid.time(k))?;
            let level = coarse.level(k);
            for cell in 0..lat.len() {
                let x = lat.point(cell);
                m = m.max((level.get(cell) - interpolate(fine, &x[..d])).abs());
            }
        }
        Ok(m)
    }
}

/// Level of `params`' grid nearest to `t`.
pub fn nearest_level(params: &SchemeParams, t: f64) -> usize {
    let k = (t / params.tau()).round();
    (k.max(0.0) as usize).min(params.steps())
}

/// Multilinear interpolation on the periodic lattice; exact at lattice points.
pub fn interpolate(field: &Field, x: &[f64]) -> f64 {
    let lat = field.lattice();
    let d = lat.dim();
    let h = lat.h();
    let mut base = [0usize; MAX_DIM];
    let mut w = [0.0f64; MAX_DIM];
    for i in 0..d {
        let mut s = x[i] / h;
        let r = s.round();
        if (s - r).abs() <= 1e-9 * r.abs().max(1.0) {
            s = r;
        }
        let fl = s.floor();
        let n = lat.cells()[i] as i64;
        base[i] = (fl as i64).rem_euclid(n) as usize;
        w[i] = s - fl;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut idx = [0usize; MAX_DIM];
        for i in 0..d {
            let upper = corner >> i & 1 == 1;
            weight *= if upper { w[i] } else { 1.0 - w[i] };
            idx[i] = if upper {
                (base[i] + 1) % lat.cells()[i]
            } else {
                base[i]
            };
        }
        if weight != 0.0 {
            acc += weight * field.get(lat.flat_index(&idx[..d]));
        }
    }
    acc
}

/// `sup |coarse - fine|` over the coarse lattice points (which must be fine lattice
/// points), using the fine level nearest each coarse time.
pub fn nested_distance(coarse: &SpaceTimeField, fine: &SpaceTimeField) -> Result<f64> {
    let (cg, fg) = (coarse.grid(), fine.grid());
    let (cl, fl) = (cg.lattice(), fg.lattice());
    let d = cl.dim();
    if fl.dim() != d {
        return Err(Error::GridMismatch("lattices differ in dimension".into()));
    }
    let ratio = cl.h() / fl.h();
    let r = ratio.round();
    if (ratio - r).abs() > 1e-9 || r < 1.0 {
        return Err(Error::GridMismatch(format!(
            "h ratio {ratio} is not an integer"
        )));
    }
    let r = r as usize;
    for i in 0..d {
        if cl.cells()[i] * r != fl.cells()[i] {
            return Err(Error::GridMismatch("lattices do not nest".into()));
        }
    }
    let mut m = 0.0f64;
    for k in 0..=cg.steps() {
        let t = cg.time(k);
        let kf = ((t / fg.tau()).round().max(0.0) as usize).min(fg.steps());
        let (a, b) = (coarse.level(k), fine.level(kf));
        for cell in 0..cl.len() {
            let mi = cl.multi_index(cell);
            let mut fi = [0usize; MAX_DIM];
            for i in 0..d {
                fi[i] = mi[i] * r;
            }
            m = m.max((a.get(cell) - b.get(fl.flat_index(&fi[..d]))).abs());
        }
    }
    Ok(m)
}
