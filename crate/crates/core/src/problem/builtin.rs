//! Built-in problems. All coefficients are periodic on the configured box.

use std::f64::consts::PI;
use std::sync::Arc;

use super::{Bounds, ClosedFormExample, ControlSet, ExampleParams, SampledProblem};
use crate::error::{Error, Result};
use crate::grid::MAX_DIM;

pub const BUILTIN_NAMES: [&str; 4] = [
    "paper_example",
    "transport_convex",
    "nondegenerate_smooth",
    "degenerate_smooth",
];

/// A built-in problem in either representation.
#[derive(Debug, Clone)]
pub enum BuiltinProblem {
    Sampled(SampledProblem),
    ClosedForm(ClosedFormExample),
}

/// `(amp/d) Σ cos(2π x_i / L_i)`.
fn cos_potential(amp: f64, lengths: &[f64], x: &[f64]) -> f64 {
    let s: f64 = x
        .iter()
        .zip(lengths)
        .map(|(xi, l)| (2.0 * PI * xi / l).cos())
        .sum();
    amp / x.len() as f64 * s
}

/// `amp Σ sin(2π x_i / L_i)`.
fn sin_terminal(amp: f64, lengths: &[f64], x: &[f64]) -> f64 {
    amp * x
        .iter()
        .zip(lengths)
        .map(|(xi, l)| (2.0 * PI * xi / l).sin())
        .sum::<f64>()
}

fn potential_lip(amp: f64, lengths: &[f64]) -> f64 {
    let lmin = lengths.iter().copied().fold(f64::INFINITY, f64::min);
    amp.abs() * 2.0 * PI / (lmin * (lengths.len() as f64).sqrt())
}

fn check_box(dim: usize, lengths: &[f64]) -> Result<()> {
    if dim == 0 || dim > MAX_DIM || lengths.len() != dim || lengths.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidProblem(format!(
            "need 1..={MAX_DIM} axes with positive box lengths, got dim {dim} and {lengths:?}"
        )));
    }
    Ok(())
}

/// Default control resolution per axis, keeping `|A|·|B|` moderate in higher dimension.
pub fn default_resolution(dim: usize) -> usize {
    match dim {
        1 => 9,
        2 => 5,
        _ => 3,
    }
}

/// Single-player (singleton `B`) control problem with a constant wind:
/// `c = |a|²/2 + V(x)`, `f = a + w e_1`, `a ∈ [-1,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportParams {
    pub dim: usize,
    pub box_lengths: Vec<f64>,
    pub potential: f64,
    pub terminal: f64,
    pub wind: f64,
    pub sigma: f64,
    pub resolution: usize,
}

impl TransportParams {
    pub fn new(dim: usize, box_length: f64) -> Self {
        Self {
            dim,
            box_lengths: vec![box_length; dim],
            potential: 0.5,
            terminal: 0.5,
            wind: 0.5,
            sigma: 0.0,
            resolution: default_resolution(dim),
        }
    }
}

pub fn transport_convex(p: &TransportParams) -> Result<SampledProblem> {
    check_box(p.dim, &p.box_lengths)?;
    if p.sigma < 0.0 {
        return Err(Error::InvalidProblem("sigma must be nonnegative".into()));
    }
    let d = p.dim;
    let lengths = p.box_lengths.clone();
    let lg = p.box_lengths.clone();
    let (pot, term, wind, sigma) = (p.potential, p.terminal, p.wind, p.sigma);
    let mut axis = vec![1.0; d];
    axis[0] = 1.0 + wind.abs();
    let drift_sup = ((1.0 + wind.abs()).powi(2) + (d as f64 - 1.0)).sqrt();
    SampledProblem::builder("transport_convex", d)
        .controls(
            ControlSet::cube_lattice(d, p.resolution)?,
            ControlSet::singleton(vec![0.0])?,
        )
        .state_cost(Arc::new(move |_, x| cos_potential(pot, &lengths, x)))
        .cost(Arc::new(|_, _, a, _| {
            0.5 * a.iter().map(|v| v * v).sum::<f64>()
        }))
        .drift(Arc::new(move |_, _, a, _, out| {
            out.copy_from_slice(a);
            out[0] += wind;
        }))
        .diffusion(Arc::new(move |_, _, out| out.fill(sigma)))
        .terminal(Arc::new(move |x| sin_terminal(term, &lg, x)))
        .autonomous(true)
        .control_only(true)
        .bounds(Bounds::analytic(
            0.5 * d as f64 + pot.abs(),
            drift_sup,
            axis,
            vec![sigma; d],
            vec![sigma; d],
            term.abs() * d as f64,
            potential_lip(pot, &p.box_lengths),
            0.0,
        ))
        .build()
}

/// Two-player game with quadratic control costs:
/// `c = V(x) + κ_a |a|²/2 - κ_b |b|²/2`, `f = (a + b)/2`, `a, b ∈ [-1,1]^d`.
/// The Hamiltonian is the sum of a concave and a convex part, hence neither.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothGameParams {
    pub dim: usize,
    pub box_lengths: Vec<f64>,
    pub potential: f64,
    pub terminal: f64,
    pub kappa_a: f64,
    pub kappa_b: f64,
    /// Nondegenerate: `Σ_i = base + amp sin(2π x_i/L_i)`; degenerate: unused.
    pub sigma_base: f64,
    /// Nondegenerate: oscillation amplitude; degenerate: `Σ_i = amp sin²(π x_i/L_i)`.
    pub sigma_amp: f64,
    pub resolution: usize,
}

impl SmoothGameParams {
    pub fn nondegenerate(dim: usize, box_length: f64) -> Self {
        Self {
            dim,
            box_lengths: vec![box_length; dim],
            potential: 0.5,
            terminal: 0.5,
            kappa_a: 1.0,
            kappa_b: 2.0,
            sigma_base: 0.1,
            sigma_amp: 0.05,
            resolution: default_resolution(dim),
        }
    }

    pub fn degenerate(dim: usize, box_length: f64) -> Self {
        Self {
            sigma_base: 0.0,
            sigma_amp: 0.2,
            ..Self::nondegenerate(dim, box_length)
        }
    }
}

fn smooth_game(
    name: &str,
    p: &SmoothGameParams,
    sigma: Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>,
    sigma_sup: f64,
    sigma_inf: f64,
) -> Result<SampledProblem> {
    check_box(p.dim, &p.box_lengths)?;
    if p.kappa_a < 0.0 || p.kappa_b < 0.0 {
        return Err(Error::InvalidProblem(
            "control cost weights must be nonnegative".into(),
        ));
    }
    let d = p.dim;
    let lengths = p.box_lengths.clone();
    let lg = p.box_lengths.clone();
    let (pot, term, ka, kb) = (p.potential, p.terminal, p.kappa_a, p.kappa_b);
    let controls = ControlSet::cube_lattice(d, p.resolution)?;
    SampledProblem::builder(name, d)
        .controls(controls.clone(), controls)
        .state_cost(Arc::new(move |_, x| cos_potential(pot, &lengths, x)))
        .cost(Arc::new(move |_, _, a, b| {
            let a2: f64 = a.iter().map(|v| v * v).sum();
            let b2: f64 = b.iter().map(|v| v * v).sum();
            0.5 * ka * a2 - 0.5 * kb * b2
        }))
        .drift(Arc::new(|_, _, a, b, out| {
            for i in 0..out.len() {
                out[i] = 0.5 * (a[i] + b[i]);
            }
        }))
        .diffusion(sigma)
        .terminal(Arc::new(move |x| sin_terminal(term, &lg, x)))
        .autonomous(true)
        .control_only(true)
        .bounds(Bounds::analytic(
            pot.abs() + 0.5 * d as f64 * ka.max(kb),
            (d as f64).sqrt(),
            vec![1.0; d],
            vec![sigma_sup; d],
            vec![sigma_inf; d],
            term.abs() * d as f64,
            potential_lip(pot, &p.box_lengths),
            0.0,
        ))
        .build()
}

pub fn nondegenerate_smooth(p: &SmoothGameParams) -> Result<SampledProblem> {
    if !(p.sigma_base > p.sigma_amp.abs()) {
        return Err(Error::InvalidProblem(format!(
            "nondegenerate diffusion needs sigma_base > |sigma_amp|, got {} and {}",
            p.sigma_base, p.sigma_amp
        )));
    }
    let lengths = p.box_lengths.clone();
    let (base, amp) = (p.sigma_base, p.sigma_amp);
    smooth_game(
        "nondegenerate_smooth",
        p,
        Arc::new(move |_, x, out| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = base + amp * (2.0 * PI * x[i] / lengths[i]).sin();
            }
        }),
        base + amp.abs(),
        base - amp.abs(),
    )
}

pub fn degenerate_smooth(p: &SmoothGameParams) -> Result<SampledProblem> {
    if p.sigma_amp < 0.0 {
        return Err(Error::InvalidProblem(
            "sigma_amp must be nonnegative".into(),
        ));
    }
    let lengths = p.box_lengths.clone();
    let amp = p.sigma_amp;
    smooth_game(
        "degenerate_smooth",
        p,
        Arc::new(move |_, x, out| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = amp * (PI * x[i] / lengths[i]).sin().powi(2);
            }
        }),
        amp,
        0.0,
    )
}

/// The example in its closed-form (`closed_form = true`) or sampled representation.
pub fn paper_example(p: &ExampleParams, closed_form: bool) -> Result<BuiltinProblem> {
    if closed_form {
        Ok(BuiltinProblem::ClosedForm(p.closed_form()?))
    } else {
        Ok(BuiltinProblem::Sampled(p.sampled()?))
    }
}
