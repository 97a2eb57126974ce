//! Run configuration, read from a single TOML file.

use std::path::Path;

use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub grid: GridSection,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub pi: PiSection,
    pub study: Option<StudySection>,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Problem name plus the parameters that apply to it; anything left out keeps the
/// built-in default.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    pub dim: usize,
    /// paper_example: analytic selections instead of sampled controls.
    pub closed_form: Option<bool>,
    pub potential: Option<f64>,
    pub terminal: Option<f64>,
    /// paper_example and transport_convex: constant diffusion.
    pub sigma: Option<f64>,
    /// transport_convex.
    pub wind: Option<f64>,
    /// Games only.
    pub kappa_a: Option<f64>,
    pub kappa_b: Option<f64>,
    pub sigma_base: Option<f64>,
    pub sigma_amp: Option<f64>,
    /// Control samples per axis (ball samples for paper_example).
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Side of the periodic box `[0, length)^d`.
    #[serde(default = "default_length")]
    pub length: f64,
    /// Cells per axis; `h = length / cells`. Unused by `study`.
    pub cells: Option<usize>,
    pub horizon: f64,
}

fn default_length() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub cfl_margin: f64,
    /// Fixed artificial viscosity.
    pub nu_h: Option<f64>,
    /// `ν_h = nu_factor · h`.
    pub nu_factor: Option<f64>,
    /// Requested time step (rounded down to divide the horizon).
    pub tau: Option<f64>,
}

impl Default for SchemeSection {
    fn default() -> Self {
        Self {
            cfl_margin: 0.9,
            nu_h: None,
            nu_factor: None,
            tau: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiSection {
    pub max_iters: usize,
    pub abs_tol: f64,
    pub initial_policy: [usize; 2],
}

impl Default for PiSection {
    fn default() -> Self {
        Self {
            max_iters: 60,
            abs_tol: 1e-12,
            initial_policy: [0, 0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeName {
    Nondegenerate,
    Degenerate,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub regime: RegimeName,
    pub alpha: f64,
    pub h_list: Vec<f64>,
    pub h_ref: f64,
    pub max_cell_updates: Option<u64>,
    pub max_stored_values: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    pub seed: u64,
    pub trials: usize,
    pub comparison_trials: usize,
    pub lipschitz_samples: usize,
    /// `|p|` range sampled by the Lipschitz suite.
    pub lipschitz_radius: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            seed: 7,
            trials: 200,
            comparison_trials: 1,
            lipschitz_samples: 10_000,
            lipschitz_radius: 3.0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Times written by `solve`; each maps to the nearest level.
    pub snapshots: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn cells(&self) -> Result<usize, CliError> {
        match self.grid.cells {
            Some(n) if n > 0 => Ok(n),
            Some(_) => Err(CliError::Config("grid.cells must be positive".into())),
            None => Err(CliError::Config(
                "grid.cells is required for this command".into(),
            )),
        }
    }

    pub fn study(&self) -> Result<&StudySection, CliError> {
        self.study
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [study] section".into()))
    }
}
