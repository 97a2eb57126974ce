//! The two-branch nonconvex example: `H(p) = max{|p| - 1, 1 - |p|} + V(x)`.
//!
//! Written as a game with `A` the closed unit ball and `B = {1, 2} × ball`:
//! `f(a, (1, e)) = a`, `f(a, (2, e)) = e`, `c(x, 1) = 1 + V(x)`, `c(x, 2) = -1 + V(x)`.
//! The closed-form variant selects `α(p) = -p/|p|` (0 at `p = 0`) and
//! `β(p) = (1, 0)` for `|p| <= 1`, `(2, p/|p|)` otherwise.

use std::f64::consts::PI;
use std::sync::Arc;

use super::{norm, BestResponse, Bounds, ControlSet, Problem, SampledProblem};
use crate::error::{Error, Result};
use crate::grid::MAX_DIM;

/// Parameters shared by the closed-form and the control-sampled variants.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleParams {
    pub dim: usize,
    pub box_lengths: Vec<f64>,
    /// Amplitude of `V(x) = (amp/d) Σ cos(2π x_i / L_i)`.
    pub potential: f64,
    /// Amplitude of `g(x) = amp Σ sin(2π x_i / L_i)`.
    pub terminal: f64,
    /// Constant diffusion `Σ_i`.
    pub sigma: f64,
    /// Ball sample count used for control indexing (and by the sampled variant).
    pub ball_resolution: usize,
}

impl ExampleParams {
    pub fn new(dim: usize, box_length: f64) -> Self {
        Self {
            dim,
            box_lengths: vec![box_length; dim],
            potential: 0.5,
            terminal: 0.5,
            sigma: 0.0,
            ball_resolution: 16,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM || self.box_lengths.len() != self.dim {
            return Err(Error::InvalidProblem(format!(
                "example needs 1..={MAX_DIM} axes with one box length each"
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::InvalidProblem(format!(
                "sigma must be nonnegative, got {}",
                self.sigma
            )));
        }
        if self.box_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidProblem("box lengths must be positive".into()));
        }
        Ok(())
    }

    fn bounds(&self) -> Bounds {
        let d = self.dim;
        let lmin = self
            .box_lengths
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        Bounds::analytic(
            1.0 + self.potential.abs(),
            1.0,
            vec![1.0; d],
            vec![self.sigma; d],
            vec![self.sigma; d],
            self.terminal.abs() * d as f64,
            self.potential.abs() * 2.0 * PI / (lmin * (d as f64).sqrt()),
            0.0,
        )
    }

    pub fn potential_at(&self, x: &[f64]) -> f64 {
        let s: f64 = x
            .iter()
            .zip(&self.box_lengths)
            .map(|(xi, l)| (2.0 * PI * xi / l).cos())
            .sum();
        self.potential / self.dim as f64 * s
    }

    pub fn terminal_at(&self, x: &[f64]) -> f64 {
        self.terminal
            * x.iter()
                .zip(&self.box_lengths)
                .map(|(xi, l)| (2.0 * PI * xi / l).sin())
                .sum::<f64>()
    }

    fn control_sets(&self) -> Result<(ControlSet, ControlSet)> {
        let ball = ControlSet::ball_samples(self.dim, self.ball_resolution)?;
        let mut b = vec![std::iter::once(1.0)
            .chain(std::iter::repeat(0.0).take(self.dim))
            .collect::<Vec<_>>()];
        b.extend(ball.iter().map(|e| {
            std::iter::once(2.0)
                .chain(e.iter().copied())
                .collect::<Vec<_>>()
        }));
        Ok((ball, ControlSet::new(b)?))
    }

    /// The variant that optimises over the sampled control sets.
    pub fn sampled(&self) -> Result<SampledProblem> {
        self.validate()?;
        let (a, b) = self.control_sets()?;
        let pc = self.clone();
        let pg = self.clone();
        let sigma = self.sigma;
        SampledProblem::builder("paper_example", self.dim)
            .controls(a, b)
            .state_cost(Arc::new(move |_, x| pc.potential_at(x)))
            .cost(Arc::new(|_, _, _, b| if b[0] == 1.0 { 1.0 } else { -1.0 }))
            .drift(Arc::new(|_, _, a, b, out| {
                if b[0] == 1.0 {
                    out.copy_from_slice(a);
                } else {
                    out.copy_from_slice(&b[1..]);
                }
            }))
            .diffusion(Arc::new(move |_, _, out| out.fill(sigma)))
            .terminal(Arc::new(move |x| pg.terminal_at(x)))
            .autonomous(true)
            .control_only(true)
            .bounds(self.bounds())
            .build()
    }

    pub fn closed_form(&self) -> Result<ClosedFormExample> {
        ClosedFormExample::new(self.clone())
    }
}

/// Control of the closed-form example: `a` in the ball and `b = (branch, e)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleControl {
    pub a: [f64; MAX_DIM],
    pub branch: u8,
    pub e: [f64; MAX_DIM],
}

/// The example with analytic best responses (no control sampling).
#[derive(Debug, Clone)]
pub struct ClosedFormExample {
    params: ExampleParams,
    bounds: Bounds,
    index_a: ControlSet,
    index_b: ControlSet,
}

impl ClosedFormExample {
    pub fn new(params: ExampleParams) -> Result<Self> {
        params.validate()?;
        let (index_a, index_b) = params.control_sets()?;
        Ok(Self {
            bounds: params.bounds(),
            params,
            index_a,
            index_b,
        })
    }

    pub fn params(&self) -> &ExampleParams {
        &self.params
    }

    /// `max{|p| - 1, 1 - |p|} + V(x)` evaluated directly.
    pub fn reference_hamiltonian(&self, x: &[f64], p: &[f64]) -> f64 {
        let r = norm(p);
        (r - 1.0).max(1.0 - r) + self.params.potential_at(x)
    }
}

impl Problem for ClosedFormExample {
    type Control = ExampleControl;

    fn name(&self) -> &str {
        "paper_example"
    }

    fn dim(&self) -> usize {
        self.params.dim
    }

    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn cost(&self, _t: f64, x: &[f64], u: &ExampleControl) -> f64 {
        let v = self.params.potential_at(x);
        if u.branch == 1 {
            1.0 + v
        } else {
            -1.0 + v
        }
    }

    fn drift(&self, _t: f64, _x: &[f64], u: &ExampleControl, out: &mut [f64]) {
        let d = self.params.dim;
        if u.branch == 1 {
            out[..d].copy_from_slice(&u.a[..d]);
        } else {
            out[..d].copy_from_slice(&u.e[..d]);
        }
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[..self.params.dim].fill(self.params.sigma);
    }

    fn terminal(&self, x: &[f64]) -> f64 {
        self.params.terminal_at(x)
    }

    fn best_response(&self, t: f64, x: &[f64], p: &[f64]) -> BestResponse<ExampleControl> {
        let d = self.params.dim;
        let r = norm(p);
        let mut dir = [0.0; MAX_DIM];
        if r > 0.0 {
            for i in 0..d {
                dir[i] = p[i] / r;
            }
        }
        let mut a = [0.0; MAX_DIM];
        for i in 0..d {
            a[i] = -dir[i];
        }
        let control = if r <= 1.0 {
            ExampleControl {
                a,
                branch: 1,
                e: [0.0; MAX_DIM],
            }
        } else {
            ExampleControl {
                a,
                branch: 2,
                e: dir,
            }
        };
        BestResponse {
            control,
            value: self.lagrangian(t, x, p, &control),
        }
    }

    fn drift_axis_max(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[..self.params.dim].fill(1.0);
    }

    fn control_counts(&self) -> (usize, usize) {
        (self.index_a.len(), self.index_b.len())
    }

    fn control_at(&self, a_index: usize, b_index: usize) -> Result<ExampleControl> {
        let (a_len, b_len) = self.control_counts();
        if a_index >= a_len || b_index >= b_len {
            return Err(Error::ControlIndex {
                a_index,
                b_index,
                a_len,
                b_len,
            });
        }
        let d = self.params.dim;
        let mut a = [0.0; MAX_DIM];
        a[..d].copy_from_slice(self.index_a.point(a_index));
        let bp = self.index_b.point(b_index);
        let mut e = [0.0; MAX_DIM];
        e[..d].copy_from_slice(&bp[1..]);
        Ok(ExampleControl {
            a,
            branch: bp[0] as u8,
            e,
        })
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}
