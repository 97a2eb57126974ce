//! Periodic space-time lattice, scalar fields on it, and the finite-difference
//! stencils used by the scheme.
//!
//! The spatial lattice is a torus `h·Z^d / (n_1 h, ..., n_d h)`; cell `(i_1, ..., i_d)`
//! sits at `x = (i_1 h, ..., i_d h)`. Storage is row-major (last axis fastest).

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// Spatial part of the grid: per-axis cell counts and the common step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    cells: Vec<usize>,
    strides: Vec<usize>,
    h: f64,
    len: usize,
}

impl Lattice {
    pub fn new(cells: &[usize], h: f64) -> Result<Self> {
        let d = cells.len();
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidGrid(format!(
                "dimension must be in 1..={MAX_DIM}, got {d}"
            )));
        }
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::InvalidGrid(format!("h must lie in (0,1), got {h}")));
        }
        if let Some(&n) = cells.iter().find(|&&n| n < 3) {
            return Err(Error::InvalidGrid(format!(
                "every axis needs at least 3 cells, got {n}"
            )));
        }
        let mut strides = vec![1; d];
        for i in (0..d - 1).rev() {
            strides[i] = strides[i + 1] * cells[i + 1];
        }
        let len = cells.iter().product();
        Ok(Self {
            cells: cells.to_vec(),
            strides,
            h,
            len,
        })
    }

    /// Lattice of a box with the given side lengths; `h = length / cells` must agree
    /// across axes.
    pub fn from_box(lengths: &[f64], cells: &[usize]) -> Result<Self> {
        if lengths.len() != cells.len() {
            return Err(Error::InvalidGrid(format!(
                "{} box lengths given for {} axes",
                lengths.len(),
                cells.len()
            )));
        }
        let h = lengths[0] / cells[0] as f64;
        for (i, (&l, &n)) in lengths.iter().zip(cells).enumerate() {
            let hi = l / n as f64;
            if (hi - h).abs() > 1e-12 * h {
                return Err(Error::InvalidGrid(format!(
                    "axis {i} has step {hi}, axis 0 has step {h}; steps must agree"
                )));
            }
        }
        Self::new(cells, h)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// Number of cells.
    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Side lengths `n_i h` of the periodic box.
    pub fn box_lengths(&self) -> Vec<f64> {
        self.cells.iter().map(|&n| n as f64 * self.h).collect()
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dim());
        multi.iter().zip(&self.strides).map(|(&i, &s)| i * s).sum()
    }

    pub fn multi_index(&self, cell: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        for (i, (&n, &s)) in self.cells.iter().zip(&self.strides).enumerate() {
            out[i] = (cell / s) % n;
        }
        out
    }

    /// Coordinates of a cell; entries past `dim()` are zero.
    #[inline]
    pub fn point(&self, cell: usize) -> [f64; MAX_DIM] {
        let mut x = [0.0; MAX_DIM];
        for (i, (&n, &s)) in self.cells.iter().zip(&self.strides).enumerate() {
            x[i] = ((cell / s) % n) as f64 * self.h;
        }
        x
    }

    /// Flat index of the neighbour one cell along `axis` in direction `sign` (±1),
    /// wrapping periodically.
    #[inline]
    pub fn neighbor(&self, cell: usize, axis: usize, positive: bool) -> usize {
        let n = self.cells[axis];
        let s = self.strides[axis];
        let i = (cell / s) % n;
        if positive {
            if i + 1 == n {
                cell - (n - 1) * s
            } else {
                cell + s
            }
        } else if i == 0 {
            cell + (n - 1) * s
        } else {
            cell - s
        }
    }
}

/// A signed axis `j ∈ {±1, ..., ±d}` selecting a one-sided difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SignedAxis {
    pub axis: usize,
    pub positive: bool,
}

impl SignedAxis {
    pub fn plus(axis: usize) -> Self {
        Self {
            axis,
            positive: true,
        }
    }

    pub fn minus(axis: usize) -> Self {
        Self {
            axis,
            positive: false,
        }
    }

    /// Parses the 1-based signed label used in the literature (`+1`, `-2`, ...).
    pub fn from_label(label: i32, dim: usize) -> Result<Self> {
        let axis = label.unsigned_abs() as usize;
        if label == 0 || axis > dim {
            return Err(Error::InvalidGrid(format!(
                "signed axis {label} outside ±1..=±{dim}"
            )));
        }
        Ok(Self {
            axis: axis - 1,
            positive: label > 0,
        })
    }

    /// The full index set `{+1, -1, ..., +d, -d}`.
    pub fn all(dim: usize) -> impl Iterator<Item = SignedAxis> {
        (0..dim).flat_map(|i| [Self::plus(i), Self::minus(i)])
    }
}

impl fmt::Display for SignedAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.positive { '+' } else { '-' };
        write!(f, "{sign}{}", self.axis + 1)
    }
}

/// Values on one time level of the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    lattice: Arc<Lattice>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(lattice: Arc<Lattice>, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a lattice of {} cells",
                values.len(),
                lattice.len()
            )));
        }
        if let Some((cell, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteValue { cell, value });
        }
        Ok(Self { lattice, values })
    }

    /// Caller guarantees finiteness and length.
    pub(crate) fn from_vec_unchecked(lattice: Arc<Lattice>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), lattice.len());
        Self { lattice, values }
    }

    pub fn constant(lattice: Arc<Lattice>, value: f64) -> Result<Self> {
        let n = lattice.len();
        Self::new(lattice, vec![value; n])
    }

    pub fn from_fn(lattice: Arc<Lattice>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let d = lattice.dim();
        let values = (0..lattice.len())
            .map(|cell| f(&lattice.point(cell)[..d]))
            .collect();
        Self::new(lattice, values)
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn same_lattice(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.lattice, &other.lattice) || *self.lattice == *other.lattice
    }

    /// Cellwise `self - other`.
    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.check_same(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Field::new(self.lattice.clone(), values)
    }

    pub(crate) fn check_same(&self, other: &Field) -> Result<()> {
        if self.same_lattice(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "fields live on lattices {:?} and {:?}",
                self.lattice.cells(),
                other.lattice.cells()
            )))
        }
    }

    /// Central difference `∇^h φ` at `cell`, written into `out[..d]`.
    #[inline]
    pub fn central_gradient_into(&self, cell: usize, out: &mut [f64]) {
        let lat = &*self.lattice;
        let inv = 0.5 / lat.h;
        for (i, o) in out.iter_mut().enumerate().take(lat.dim()) {
            let up = self.values[lat.neighbor(cell, i, true)];
            let down = self.values[lat.neighbor(cell, i, false)];
            *o = (up - down) * inv;
        }
    }

    pub fn central_gradient(&self, cell: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.lattice.dim()];
        self.central_gradient_into(cell, &mut out);
        out
    }

    /// One-sided difference `D_j^h φ = (φ(x + s h e_i) - φ(x)) / (s h)` for `j = s·i`.
    #[inline]
    pub fn one_sided_diff(&self, cell: usize, j: SignedAxis) -> f64 {
        let lat = &*self.lattice;
        let nb = self.values[lat.neighbor(cell, j.axis, j.positive)];
        let step = if j.positive { lat.h } else { -lat.h };
        (nb - self.values[cell]) / step
    }

    /// Second difference `Δ_i^h φ`.
    #[inline]
    pub fn second_diff(&self, cell: usize, axis: usize) -> f64 {
        let lat = &*self.lattice;
        let up = self.values[lat.neighbor(cell, axis, true)];
        let down = self.values[lat.neighbor(cell, axis, false)];
        (up - 2.0 * self.values[cell] + down) / (lat.h * lat.h)
    }

    /// `Σ_{j∈ℰ} |D_j^h φ|²` at `cell`.
    pub fn gradient_energy(&self, cell: usize) -> f64 {
        SignedAxis::all(self.lattice.dim())
            .map(|j| self.one_sided_diff(cell, j).powi(2))
            .sum()
    }
}

/// Space-time grid: a lattice plus the time levels `{0, τ, ..., T}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lattice: Arc<Lattice>,
    tau: f64,
    horizon: f64,
    levels: usize,
}

impl Grid {
    /// Builds the grid with the largest `tau ≤ tau_max` for which `T / tau` is an integer.
    pub fn new(lattice: Arc<Lattice>, horizon: f64, tau_max: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !(tau_max > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "time step bound must be positive, got {tau_max}"
            )));
        }
        let mut levels = (horizon / tau_max).ceil().max(1.0) as usize;
        while horizon / levels as f64 > tau_max {
            levels += 1;
        }
        Self::with_levels(lattice, horizon, levels)
    }

    pub fn with_levels(lattice: Arc<Lattice>, horizon: f64, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidGrid("need at least one time step".into()));
        }
        let tau = horizon / levels as f64;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidGrid(format!(
                "tau must lie in (0,1), got {tau}"
            )));
        }
        Ok(Self {
            lattice,
            tau,
            horizon,
            levels,
        })
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    #[inline]
    pub fn tau(&self) -> f64 {
        self.tau
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.lattice.h()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of time steps `K = T / tau`; there are `K + 1` levels.
    pub fn steps(&self) -> usize {
        self.levels
    }

    /// Time of level `k`.
    #[inline]
    pub fn time(&self, level: usize) -> f64 {
        if level == self.levels {
            self.horizon
        } else {
            level as f64 * self.tau
        }
    }

    /// Backward difference in time `∂_t^τ φ = (φ(t) - φ(t-τ)) / τ`.
    pub fn time_diff(&self, current: &Field, previous: &Field) -> Result<Field> {
        current.check_same(previous)?;
        let values = current
            .values()
            .iter()
            .zip(previous.values())
            .map(|(c, p)| (c - p) / self.tau)
            .collect();
        Field::new(current.lattice().clone(), values)
    }
}

/// A full solution: one field per time level `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    grid: Grid,
    levels: Vec<Field>,
}

impl SpaceTimeField {
    pub fn new(grid: Grid, levels: Vec<Field>) -> Result<Self> {
        if levels.len() != grid.steps() + 1 {
            return Err(Error::GridMismatch(format!(
                "{} levels for a grid with {} steps",
                levels.len(),
                grid.steps()
            )));
        }
        if let Some(k) = levels
            .iter()
            .position(|f| **f.lattice() != **grid.lattice())
        {
            return Err(Error::GridMismatch(format!(
                "level {k} is on a different lattice"
            )));
        }
        Ok(Self { grid, levels })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn level(&self, k: usize) -> &Field {
        &self.levels[k]
    }

    pub fn levels(&self) -> &[Field] {
        &self.levels
    }

    pub fn map_levels(&self, mut f: impl FnMut(usize, &Field) -> Result<Field>) -> Result<Self> {
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| f(k, l))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.grid.clone(), levels)
    }

    pub fn sup_norm(&self) -> f64 {
        self.levels.iter().fold(0.0, |m, f| m.max(f.sup_norm()))
    }

    /// `sup |self - other|` over all levels and cells.
    pub fn sup_distance(&self, other: &SpaceTimeField) -> Result<f64> {
        if self.levels.len() != other.levels.len() {
            return Err(Error::GridMismatch(
                "different number of time levels".into(),
            ));
        }
        let mut m = 0.0f64;
        for (a, b) in self.levels.iter().zip(&other.levels) {
            a.check_same(b)?;
            for (x, y) in a.values().iter().zip(b.values()) {
                m = m.max((x - y).abs());
            }
        }
        Ok(m)
    }
}
