use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dot, norm, BestResponse, BoundSource, Bounds, ControlSet, Problem};
use crate::error::{Error, Result};
use crate::grid::MAX_DIM;

pub type CostFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64]) -> f64 + Send + Sync>;
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type StateCostFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Indices into the two control sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ControlPair {
    pub a_index: usize,
    pub b_index: usize,
}

/// Inflation applied to sampled bound estimates.
pub const ESTIMATE_INFLATION: f64 = 1.05;

/// A problem whose control sets are finite samples and whose coefficients are
/// arbitrary closures.
#[derive(Clone)]
pub struct SampledProblem {
    name: String,
    dim: usize,
    controls_a: ControlSet,
    controls_b: ControlSet,
    cost: CostFn,
    state_cost: Option<StateCostFn>,
    drift: DriftFn,
    diffusion: DiffusionFn,
    terminal: TerminalFn,
    bounds: Bounds,
    autonomous: bool,
    tables: Option<PairTables>,
}

/// Pair cost and drift stored at index `b * |A| + a`.
#[derive(Clone)]
struct PairTables {
    cost: Vec<f64>,
    drift: Vec<f64>,
}

impl std::fmt::Debug for SampledProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SampledProblem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("controls_a", &self.controls_a.len())
            .field("controls_b", &self.controls_b.len())
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl SampledProblem {
    pub fn builder(name: impl Into<String>, dim: usize) -> SampledProblemBuilder {
        SampledProblemBuilder {
            name: name.into(),
            dim,
            controls: None,
            cost: None,
            state_cost: None,
            drift: None,
            diffusion: None,
            terminal: None,
            bounds: None,
            autonomous: false,
            control_only: false,
        }
    }

    pub fn controls_a(&self) -> &ControlSet {
        &self.controls_a
    }

    pub fn controls_b(&self) -> &ControlSet {
        &self.controls_b
    }

    #[inline]
    fn pair_index(&self, u: &ControlPair) -> usize {
        u.b_index * self.controls_a.len() + u.a_index
    }

    /// Same loop as the closure path, reading the tables.
    fn tabulated_best_response(
        &self,
        tab: &PairTables,
        state: Option<f64>,
        p: &[f64],
    ) -> BestResponse<ControlPair> {
        let d = self.dim;
        let na = self.controls_a.len();
        let mut best = BestResponse {
            control: ControlPair {
                a_index: 0,
                b_index: 0,
            },
            value: f64::NEG_INFINITY,
        };
        for bi in 0..self.controls_b.len() {
            let mut inner_a = 0;
            let mut inner = f64::INFINITY;
            for ai in 0..na {
                let k = bi * na + ai;
                let c = match state {
                    Some(s) => s + tab.cost[k],
                    None => tab.cost[k],
                };
                let l = c + dot(p, &tab.drift[k * d..(k + 1) * d]);
                if l < inner {
                    inner = l;
                    inner_a = ai;
                }
            }
            if inner > best.value || bi == 0 {
                best = BestResponse {
                    control: ControlPair {
                        a_index: inner_a,
                        b_index: bi,
                    },
                    value: inner,
                };
            }
        }
        best
    }

    /// `L(t,x,p)(a,b)` at control indices.
    pub fn lagrangian_at(
        &self,
        t: f64,
        x: &[f64],
        p: &[f64],
        a_index: usize,
        b_index: usize,
    ) -> Result<f64> {
        let u = self.control_at(a_index, b_index)?;
        Ok(self.lagrangian(t, x, p, &u))
    }
}

impl Problem for SampledProblem {
    type Control = ControlPair;

    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    #[inline]
    fn cost(&self, t: f64, x: &[f64], u: &ControlPair) -> f64 {
        let c = match &self.tables {
            Some(tab) => tab.cost[self.pair_index(u)],
            None => (self.cost)(
                t,
                x,
                self.controls_a.point(u.a_index),
                self.controls_b.point(u.b_index),
            ),
        };
        match &self.state_cost {
            Some(s) => s(t, x) + c,
            None => c,
        }
    }

    #[inline]
    fn drift(&self, t: f64, x: &[f64], u: &ControlPair, out: &mut [f64]) {
        if let Some(tab) = &self.tables {
            let k = self.pair_index(u) * self.dim;
            out.copy_from_slice(&tab.drift[k..k + self.dim]);
            return;
        }
        (self.drift)(
            t,
            x,
            self.controls_a.point(u.a_index),
            self.controls_b.point(u.b_index),
            out,
        )
    }

    #[inline]
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    fn best_response(&self, t: f64, x: &[f64], p: &[f64]) -> BestResponse<ControlPair> {
        let d = self.dim;
        let mut f = [0.0; MAX_DIM];
        let state = self.state_cost.as_ref().map(|s| s(t, x));
        if let Some(tab) = &self.tables {
            return self.tabulated_best_response(tab, state, p);
        }
        let mut best = BestResponse {
            control: ControlPair {
                a_index: 0,
                b_index: 0,
            },
            value: f64::NEG_INFINITY,
        };
        for (bi, b) in self.controls_b.iter().enumerate() {
            let mut inner_a = 0;
            let mut inner = f64::INFINITY;
            for (ai, a) in self.controls_a.iter().enumerate() {
                (self.drift)(t, x, a, b, &mut f[..d]);
                let c = (self.cost)(t, x, a, b);
                let c = match state {
                    Some(s) => s + c,
                    None => c,
                };
                let l = c + dot(p, &f[..d]);
                if l < inner {
                    inner = l;
                    inner_a = ai;
                }
            }
            if inner > best.value || bi == 0 {
                best = BestResponse {
                    control: ControlPair {
                        a_index: inner_a,
                        b_index: bi,
                    },
                    value: inner,
                };
            }
        }
        best
    }

    fn drift_axis_max(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut f = [0.0; MAX_DIM];
        out[..d].fill(0.0);
        if let Some(tab) = &self.tables {
            for f in tab.drift.chunks_exact(d) {
                for i in 0..d {
                    out[i] = out[i].max(f[i].abs());
                }
            }
            return;
        }
        for b in self.controls_b.iter() {
            for a in self.controls_a.iter() {
                (self.drift)(t, x, a, b, &mut f[..d]);
                for i in 0..d {
                    out[i] = out[i].max(f[i].abs());
                }
            }
        }
    }

    fn control_counts(&self) -> (usize, usize) {
        (self.controls_a.len(), self.controls_b.len())
    }

    fn control_at(&self, a_index: usize, b_index: usize) -> Result<ControlPair> {
        let (a_len, b_len) = self.control_counts();
        if a_index >= a_len || b_index >= b_len {
            return Err(Error::ControlIndex {
                a_index,
                b_index,
                a_len,
                b_len,
            });
        }
        Ok(ControlPair { a_index, b_index })
    }

    fn is_autonomous(&self) -> bool {
        self.autonomous
    }
}

enum BoundSpec {
    Declared(Bounds),
    Estimate {
        box_lengths: Vec<f64>,
        horizon: f64,
        samples: usize,
        seed: u64,
    },
}

pub struct SampledProblemBuilder {
    name: String,
    dim: usize,
    controls: Option<(ControlSet, ControlSet)>,
    cost: Option<CostFn>,
    state_cost: Option<StateCostFn>,
    drift: Option<DriftFn>,
    diffusion: Option<DiffusionFn>,
    terminal: Option<TerminalFn>,
    bounds: Option<BoundSpec>,
    autonomous: bool,
    control_only: bool,
}

impl SampledProblemBuilder {
    pub fn controls(mut self, a: ControlSet, b: ControlSet) -> Self {
        self.controls = Some((a, b));
        self
    }

    pub fn cost(mut self, c: CostFn) -> Self {
        self.cost = Some(c);
        self
    }

    /// Control-independent part of the cost, added to `cost` and evaluated once per
    /// `(t, x)` by the best-response loop.
    pub fn state_cost(mut self, s: StateCostFn) -> Self {
        self.state_cost = Some(s);
        self
    }

    pub fn drift(mut self, f: DriftFn) -> Self {
        self.drift = Some(f);
        self
    }

    pub fn diffusion(mut self, s: DiffusionFn) -> Self {
        self.diffusion = Some(s);
        self
    }

    pub fn terminal(mut self, g: TerminalFn) -> Self {
        self.terminal = Some(g);
        self
    }

    pub fn autonomous(mut self, yes: bool) -> Self {
        self.autonomous = yes;
        self
    }

    /// Declares that `cost` and `drift` ignore `(t, x)`, so they can be tabulated once
    /// per control pair. Any state dependence of the cost belongs in `state_cost`.
    pub fn control_only(mut self, yes: bool) -> Self {
        self.control_only = yes;
        self
    }

    pub fn bounds(mut self, b: Bounds) -> Self {
        self.bounds = Some(BoundSpec::Declared(b));
        self
    }

    /// Estimate the metadata from `samples` random points of `[0,T] × box`
    /// (all control pairs at each point), inflated by 5%.
    pub fn estimate_bounds(
        mut self,
        box_lengths: Vec<f64>,
        horizon: f64,
        samples: usize,
        seed: u64,
    ) -> Self {
        self.bounds = Some(BoundSpec::Estimate {
            box_lengths,
            horizon,
            samples,
            seed,
        });
        self
    }

    pub fn build(self) -> Result<SampledProblem> {
        let missing = |what: &str| Error::InvalidProblem(format!("{what} not set"));
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(Error::InvalidProblem(format!(
                "dimension must be in 1..={MAX_DIM}, got {}",
                self.dim
            )));
        }
        let (controls_a, controls_b) = self.controls.ok_or_else(|| missing("controls"))?;
        let mut problem = SampledProblem {
            name: self.name,
            dim: self.dim,
            controls_a,
            controls_b,
            cost: self.cost.ok_or_else(|| missing("cost"))?,
            state_cost: self.state_cost,
            drift: self.drift.ok_or_else(|| missing("drift"))?,
            diffusion: self.diffusion.ok_or_else(|| missing("diffusion"))?,
            terminal: self.terminal.ok_or_else(|| missing("terminal"))?,
            bounds: Bounds::analytic(0.0, 0.0, vec![], vec![], vec![], 0.0, 0.0, 0.0),
            autonomous: self.autonomous,
            tables: None,
        };
        if self.control_only {
            problem.tables = Some(tabulate(&problem));
        }
        problem.bounds = match self.bounds.ok_or_else(|| missing("bounds"))? {
            BoundSpec::Declared(b) => b,
            BoundSpec::Estimate {
                box_lengths,
                horizon,
                samples,
                seed,
            } => estimate(&problem, &box_lengths, horizon, samples, seed)?,
        };
        let d = problem.dim;
        let b = &problem.bounds;
        if b.drift_axis_sup.len() != d || b.sigma_sup.len() != d || b.sigma_inf.len() != d {
            return Err(Error::InvalidProblem(format!(
                "per-axis bounds must have {d} entries"
            )));
        }
        Ok(problem)
    }
}

fn tabulate(p: &SampledProblem) -> PairTables {
    let d = p.dim;
    let origin = [0.0; MAX_DIM];
    let n = p.controls_a.len() * p.controls_b.len();
    let mut cost = Vec::with_capacity(n);
    let mut drift = vec![0.0; n * d];
    for b in p.controls_b.iter() {
        for a in p.controls_a.iter() {
            let k = cost.len();
            cost.push((p.cost)(0.0, &origin[..d], a, b));
            (p.drift)(0.0, &origin[..d], a, b, &mut drift[k * d..(k + 1) * d]);
        }
    }
    PairTables { cost, drift }
}

fn estimate(
    p: &SampledProblem,
    box_lengths: &[f64],
    horizon: f64,
    samples: usize,
    seed: u64,
) -> Result<Bounds> {
    let d = p.dim;
    if box_lengths.len() != d || samples == 0 {
        return Err(Error::InvalidProblem(
            "bound estimation needs one box length per axis and at least one sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let t = rng.gen_range(0.0..=horizon);
        let mut x = [0.0; MAX_DIM];
        for i in 0..d {
            x[i] = rng.gen_range(0.0..box_lengths[i]);
        }
        (t, x)
    };
    let (na, nb) = p.control_counts();
    let mut cost_sup = 0.0f64;
    let mut drift_sup = 0.0f64;
    let mut axis = vec![0.0f64; d];
    let mut sig_sup = vec![0.0f64; d];
    let mut sig_inf = vec![f64::INFINITY; d];
    let mut g_sup = 0.0f64;
    let mut cost_lip = 0.0f64;
    let mut drift_lip = 0.0f64;
    let mut f1 = [0.0; MAX_DIM];
    let mut f2 = [0.0; MAX_DIM];
    let mut s = [0.0; MAX_DIM];
    for _ in 0..samples {
        let (t1, x1) = draw(&mut rng);
        let (t2, x2) = draw(&mut rng);
        let dist = (t2 - t1).abs() + norm(&(0..d).map(|i| x2[i] - x1[i]).collect::<Vec<_>>());
        g_sup = g_sup.max(p.terminal(&x1[..d]).abs());
        p.diffusion(t1, &x1[..d], &mut s[..d]);
        for i in 0..d {
            if s[i] < 0.0 {
                return Err(Error::InvalidProblem(format!(
                    "Σ_{} = {} < 0 at t={t1}, x={:?}",
                    i + 1,
                    s[i],
                    &x1[..d]
                )));
            }
            sig_sup[i] = sig_sup[i].max(s[i]);
            sig_inf[i] = sig_inf[i].min(s[i]);
        }
        for ai in 0..na {
            for bi in 0..nb {
                let u = ControlPair {
                    a_index: ai,
                    b_index: bi,
                };
                let c1 = p.cost(t1, &x1[..d], &u);
                let c2 = p.cost(t2, &x2[..d], &u);
                p.drift(t1, &x1[..d], &u, &mut f1[..d]);
                p.drift(t2, &x2[..d], &u, &mut f2[..d]);
                cost_sup = cost_sup.max(c1.abs());
                drift_sup = drift_sup.max(norm(&f1[..d]));
                for i in 0..d {
                    axis[i] = axis[i].max(f1[i].abs());
                }
                if dist > 0.0 {
                    cost_lip = cost_lip.max((c1 - c2).abs() / dist);
                    let df: Vec<f64> = (0..d).map(|i| f1[i] - f2[i]).collect();
                    drift_lip = drift_lip.max(norm(&df) / dist);
                }
            }
        }
    }
    let k = ESTIMATE_INFLATION;
    Ok(Bounds {
        cost_sup: cost_sup * k,
        drift_sup: drift_sup * k,
        drift_axis_sup: axis.into_iter().map(|v| v * k).collect(),
        sigma_sup: sig_sup.into_iter().map(|v| v * k).collect(),
        sigma_inf: sig_inf.into_iter().map(|v| v / k).collect(),
        terminal_sup: g_sup * k,
        cost_lip: cost_lip * k,
        drift_lip: drift_lip * k,
        source: BoundSource::Sampled {
            samples,
            inflation: k,
        },
    })
}
