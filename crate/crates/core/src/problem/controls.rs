use crate::error::{Error, Result};

/// Finite, ordered sample of a compact control set.
///
/// The order is part of the contract: best responses break ties by lowest index.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    dim: usize,
    points: Vec<f64>,
}

impl ControlSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidProblem("control set is empty".into()))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidProblem(
                "control points need at least one coordinate".into(),
            ));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::InvalidProblem(format!(
                    "control point {i} has {} coordinates, expected {dim}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidProblem(format!(
                    "control point {i} is not finite"
                )));
            }
            if let Some(j) = points[..i].iter().position(|q| q == p) {
                return Err(Error::InvalidProblem(format!(
                    "control points {j} and {i} coincide"
                )));
            }
        }
        Ok(Self {
            dim,
            points: points.into_iter().flatten().collect(),
        })
    }

    pub fn singleton(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point])
    }

    /// `m` equispaced points of `[lo, hi]`, endpoints included.
    pub fn uniform_interval(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if m == 1 {
            return Self::singleton(vec![0.5 * (lo + hi)]);
        }
        Self::new(
            (0..m)
                .map(|k| vec![lo + (hi - lo) * k as f64 / (m - 1) as f64])
                .collect(),
        )
    }

    /// Tensor lattice with `m` points per axis on `[-1, 1]^dim`.
    pub fn cube_lattice(dim: usize, m: usize) -> Result<Self> {
        let axis: Vec<f64> = if m == 1 {
            vec![0.0]
        } else {
            (0..m)
                .map(|k| -1.0 + 2.0 * k as f64 / (m - 1) as f64)
                .collect()
        };
        let mut pts = vec![Vec::new()];
        for _ in 0..dim {
            pts = pts
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        Self::new(pts)
    }

    /// Sample of the closed unit ball: `m` points of `[-1,1]` in one dimension; the
    /// centre plus `m` boundary directions (a ring in 2-D, a Fibonacci sphere in 3-D)
    /// otherwise. The boundary matters because linear costs are minimised there.
    pub fn ball_samples(dim: usize, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidProblem(format!(
                "ball sampling needs at least 2 points, got {m}"
            )));
        }
        match dim {
            1 => Self::uniform_interval(-1.0, 1.0, m),
            d => {
                let mut pts = vec![vec![0.0; d]];
                pts.extend(sphere_directions(d, m));
                Self::new(pts)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point_dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }
}

fn sphere_directions(d: usize, m: usize) -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    match d {
        2 => (0..m)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / m as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        _ => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..m)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / m as f64;
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * k as f64;
                    vec![r * th.cos(), r * th.sin(), z]
                })
                .collect()
        }
    }
}
