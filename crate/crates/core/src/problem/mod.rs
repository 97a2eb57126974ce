//! Game data and the Isaacs Hamiltonian.
//!
//! A problem supplies the running cost `c(t,x,a,b)`, drift `f(t,x,a,b)`, diagonal
//! diffusion `Σ_i(t,x)` and terminal data `g(x)`, together with a best-response
//! oracle realising `H(t,x,p) = sup_b inf_a [c + p·f]`.

mod bounds;
pub mod builtin;
mod controls;
mod example;
mod sampled;

use std::fmt::Debug;

use rand::Rng;
use serde::Serialize;

use crate::grid::MAX_DIM;

pub use bounds::{BoundSource, Bounds};
pub use controls::ControlSet;
pub use example::{ClosedFormExample, ExampleControl, ExampleParams};
pub use sampled::{ControlPair, SampledProblem, SampledProblemBuilder};

/// A minimiser/maximiser pair realising the Hamiltonian at one `(t, x, p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestResponse<C> {
    pub control: C,
    /// `L(t,x,p)(a*, b*)`, i.e. the Hamiltonian over the problem's control sets.
    pub value: f64,
}

/// Data of a Bellman-Isaacs problem on a periodic box.
///
/// `x` and `p` slices always have length `dim()`.
pub trait Problem: Send + Sync {
    /// A control pair `(a, b)`; what the policy fields store per cell.
    type Control: Copy + PartialEq + Debug + Send + Sync;

    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn bounds(&self) -> &Bounds;

    fn cost(&self, t: f64, x: &[f64], u: &Self::Control) -> f64;

    fn drift(&self, t: f64, x: &[f64], u: &Self::Control, out: &mut [f64]);

    /// Diagonal entries `Σ_i = σ_i²`, written into `out[..dim]`.
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);

    fn terminal(&self, x: &[f64]) -> f64;

    /// Lowest-index argmin over `a` for every `b`, then lowest-index argmax over `b`.
    fn best_response(&self, t: f64, x: &[f64], p: &[f64]) -> BestResponse<Self::Control>;

    /// Per-axis `max_{a,b} |f_i(t,x,a,b)|`, written into `out[..dim]`.
    fn drift_axis_max(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// Sizes of the (sampled) control sets used for indexing.
    fn control_counts(&self) -> (usize, usize);

    /// The control pair stored at the given indices.
    fn control_at(&self, a_index: usize, b_index: usize) -> crate::Result<Self::Control>;

    /// Coefficients do not depend on `t`.
    fn is_autonomous(&self) -> bool {
        false
    }

    /// `L(t,x,p)(a,b) = c + p·f`, with the dot product accumulated left to right.
    fn lagrangian(&self, t: f64, x: &[f64], p: &[f64], u: &Self::Control) -> f64 {
        let mut f = [0.0; MAX_DIM];
        let d = self.dim();
        self.drift(t, x, u, &mut f[..d]);
        self.cost(t, x, u) + dot(p, &f[..d])
    }

    fn hamiltonian(&self, t: f64, x: &[f64], p: &[f64]) -> f64 {
        self.best_response(t, x, p).value
    }

    fn random_control<R: Rng>(&self, rng: &mut R) -> Self::Control
    where
        Self: Sized,
    {
        let (na, nb) = self.control_counts();
        self.control_at(rng.gen_range(0..na), rng.gen_range(0..nb))
            .expect("indices drawn inside the control counts")
    }
}

#[inline]
pub(crate) fn dot(p: &[f64], f: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(f) {
        acc += a * b;
    }
    acc
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Outcome of sampling the Lipschitz estimate for `H`.
#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    pub samples: usize,
    /// Largest observed `|H_1 - H_2| / bound`.
    pub max_ratio: f64,
    /// Pairs whose bound is zero but whose `H` values differ by more than 1e-12.
    pub zero_bound_violations: usize,
    pub passed: bool,
}

/// Ratio tolerance for sampled inequality audits.
pub const RATIO_TOLERANCE: f64 = 1e-9;

/// Samples pairs `(t_i, x_i, p_i)` and audits
/// `|H_1 - H_2| <= (Lip c + Lip f · min|p_i|)(|Δt| + |Δx|) + ||f|| |Δp|`.
///
/// Half of the pairs are small perturbations of each other so the local
/// behaviour is exercised, not only far-apart points.
pub fn hamiltonian_lipschitz_check<P: Problem, R: Rng>(
    problem: &P,
    box_lengths: &[f64],
    horizon: f64,
    p_radius: f64,
    samples: usize,
    rng: &mut R,
) -> LipschitzReport {
    let d = problem.dim();
    let b = problem.bounds();
    let mut max_ratio = 0.0f64;
    let mut zero_bound_violations = 0;
    for s in 0..samples {
        let mut x1 = [0.0; MAX_DIM];
        let mut x2 = [0.0; MAX_DIM];
        let mut p1 = [0.0; MAX_DIM];
        let mut p2 = [0.0; MAX_DIM];
        let t1 = rng.gen_range(0.0..=horizon);
        let local = s % 2 == 1;
        let scale = if local { 1e-3 } else { 1.0 };
        let t2 = if s % 7 == 0 {
            t1
        } else {
            (t1 + scale * rng.gen_range(-horizon..=horizon)).clamp(0.0, horizon)
        };
        for i in 0..d {
            x1[i] = rng.gen_range(0.0..box_lengths[i]);
            x2[i] = if s % 5 == 0 {
                x1[i]
            } else {
                (x1[i] + scale * rng.gen_range(-box_lengths[i]..box_lengths[i]))
                    .rem_euclid(box_lengths[i])
            };
            p1[i] = rng.gen_range(-p_radius..=p_radius);
            p2[i] = if s % 3 == 0 {
                p1[i]
            } else {
                p1[i] + scale * rng.gen_range(-p_radius..=p_radius)
            };
        }
        let h1 = problem.hamiltonian(t1, &x1[..d], &p1[..d]);
        let h2 = problem.hamiltonian(t2, &x2[..d], &p2[..d]);
        let lhs = (h1 - h2).abs();
        let dx: Vec<f64> = (0..d).map(|i| x2[i] - x1[i]).collect();
        let dp: Vec<f64> = (0..d).map(|i| p2[i] - p1[i]).collect();
        let pmin = norm(&p1[..d]).min(norm(&p2[..d]));
        let rhs = (b.cost_lip + b.drift_lip * pmin) * ((t2 - t1).abs() + norm(&dx))
            + b.drift_sup * norm(&dp);
        if rhs == 0.0 {
            if lhs > 1e-12 {
                zero_bound_violations += 1;
            }
        } else {
            max_ratio = max_ratio.max(lhs / rhs);
        }
    }
    LipschitzReport {
        samples,
        max_ratio,
        zero_bound_violations,
        passed: max_ratio <= 1.0 + RATIO_TOLERANCE && zero_bound_violations == 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn constant_problem() -> SampledProblem {
        SampledProblem::builder("constant", 2)
            .controls(
                ControlSet::uniform_interval(-1.0, 1.0, 3).unwrap(),
                ControlSet::singleton(vec![0.0]).unwrap(),
            )
            .cost(Arc::new(|_, _, _, _| 0.25))
            .drift(Arc::new(|_, _, a, _, out| {
                out[0] = a[0];
                out[1] = 0.5;
            }))
            .diffusion(Arc::new(|_, _, out| out.fill(0.0)))
            .terminal(Arc::new(|_| 0.0))
            .autonomous(true)
            .bounds(Bounds::analytic(
                0.25,
                (1.25f64).sqrt(),
                vec![1.0, 0.5],
                vec![0.0; 2],
                vec![0.0; 2],
                0.0,
                0.0,
                0.0,
            ))
            .build()
            .unwrap()
    }

    #[test]
    fn lipschitz_check_on_constant_coefficients() {
        let p = constant_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = hamiltonian_lipschitz_check(&p, &[1.0, 1.0], 1.0, 3.0, 2000, &mut rng);
        assert!(r.passed, "{r:?}");
        assert!(r.max_ratio <= 1.0);
    }

    #[test]
    fn lipschitz_check_identical_points() {
        let p = constant_problem();
        let x = [0.3, 0.4];
        let q = [1.0, -2.0];
        assert_eq!(p.hamiltonian(0.1, &x, &q) - p.hamiltonian(0.1, &x, &q), 0.0);
    }

    #[test]
    fn hamiltonian_is_lipschitz_in_p() {
        let p = constant_problem();
        let x = [0.1, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let p1 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let p2 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let lhs = (p.hamiltonian(0.0, &x, &p1) - p.hamiltonian(0.0, &x, &p2)).abs();
            let dp = [p1[0] - p2[0], p1[1] - p2[1]];
            assert!(lhs <= p.bounds().drift_sup * norm(&dp) * (1.0 + 1e-12) + 1e-15);
        }
    }
}
