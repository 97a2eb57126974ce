use serde::Serialize;

/// How a problem's sup-norm and Lipschitz metadata was obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundSource {
    /// Declared exactly by the problem definition.
    Analytic,
    /// Estimated from random samples and inflated by `inflation`.
    Sampled { samples: usize, inflation: f64 },
}

/// Sup-norm and Lipschitz metadata of the coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bounds {
    /// `||c||_∞`.
    pub cost_sup: f64,
    /// `||f||_∞` with the Euclidean norm on `f`.
    pub drift_sup: f64,
    /// Per-axis `sup |f_i|`.
    pub drift_axis_sup: Vec<f64>,
    /// Per-axis `sup Σ_i`.
    pub sigma_sup: Vec<f64>,
    /// Per-axis `inf Σ_i`.
    pub sigma_inf: Vec<f64>,
    pub terminal_sup: f64,
    /// Lipschitz constant of `c` in `(t,x)` for the metric `|Δt| + |Δx|`.
    pub cost_lip: f64,
    /// Lipschitz constant of `f` in `(t,x)`.
    pub drift_lip: f64,
    pub source: BoundSource,
}

impl Bounds {
    #[allow(clippy::too_many_arguments)]
    pub fn analytic(
        cost_sup: f64,
        drift_sup: f64,
        drift_axis_sup: Vec<f64>,
        sigma_sup: Vec<f64>,
        sigma_inf: Vec<f64>,
        terminal_sup: f64,
        cost_lip: f64,
        drift_lip: f64,
    ) -> Self {
        Self {
            cost_sup,
            drift_sup,
            drift_axis_sup,
            sigma_sup,
            sigma_inf,
            terminal_sup,
            cost_lip,
            drift_lip,
            source: BoundSource::Analytic,
        }
    }

    /// `max_i sup Σ_i`.
    pub fn sigma_max(&self) -> f64 {
        self.sigma_sup.iter().copied().fold(0.0, f64::max)
    }

    /// `min_i inf Σ_i`.
    pub fn sigma_min(&self) -> f64 {
        self.sigma_inf.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_degenerate(&self) -> bool {
        self.sigma_min() <= 0.0
    }
}
