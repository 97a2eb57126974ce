//! Built-in problems by name.

use hjpi::problem::builtin::{
    degenerate_smooth, nondegenerate_smooth, paper_example, transport_convex, BuiltinProblem,
    SmoothGameParams, TransportParams, BUILTIN_NAMES,
};
use hjpi::problem::{ExampleParams, SampledProblem};

use crate::config::ProblemSection;
use crate::error::CliError;

/// Runs `$body` with `$p` bound to the concrete problem inside a `BuiltinProblem`.
#[macro_export]
macro_rules! with_problem {
    ($problem:expr, $p:ident => $body:expr) => {
        match $problem {
            hjpi::problem::builtin::BuiltinProblem::Sampled($p) => $body,
            hjpi::problem::builtin::BuiltinProblem::ClosedForm($p) => $body,
        }
    };
}

fn allowed_keys(name: &str) -> &'static [&'static str] {
    match name {
        "paper_example" => &[
            "closed_form",
            "potential",
            "terminal",
            "sigma",
            "resolution",
        ],
        "transport_convex" => &["potential", "terminal", "sigma", "wind", "resolution"],
        "nondegenerate_smooth" => &[
            "potential",
            "terminal",
            "kappa_a",
            "kappa_b",
            "sigma_base",
            "sigma_amp",
            "resolution",
        ],
        "degenerate_smooth" => &[
            "potential",
            "terminal",
            "kappa_a",
            "kappa_b",
            "sigma_amp",
            "resolution",
        ],
        _ => &[],
    }
}

fn present_keys(s: &ProblemSection) -> Vec<&'static str> {
    let mut keys = Vec::new();
    let mut note = |set: bool, k| {
        if set {
            keys.push(k)
        }
    };
    note(s.closed_form.is_some(), "closed_form");
    note(s.potential.is_some(), "potential");
    note(s.terminal.is_some(), "terminal");
    note(s.sigma.is_some(), "sigma");
    note(s.wind.is_some(), "wind");
    note(s.kappa_a.is_some(), "kappa_a");
    note(s.kappa_b.is_some(), "kappa_b");
    note(s.sigma_base.is_some(), "sigma_base");
    note(s.sigma_amp.is_some(), "sigma_amp");
    note(s.resolution.is_some(), "resolution");
    keys
}

fn game_params(s: &ProblemSection, mut p: SmoothGameParams) -> SmoothGameParams {
    p.potential = s.potential.unwrap_or(p.potential);
    p.terminal = s.terminal.unwrap_or(p.terminal);
    p.kappa_a = s.kappa_a.unwrap_or(p.kappa_a);
    p.kappa_b = s.kappa_b.unwrap_or(p.kappa_b);
    p.sigma_base = s.sigma_base.unwrap_or(p.sigma_base);
    p.sigma_amp = s.sigma_amp.unwrap_or(p.sigma_amp);
    p.resolution = s.resolution.unwrap_or(p.resolution);
    p
}

pub fn build_problem(s: &ProblemSection, length: f64) -> Result<BuiltinProblem, CliError> {
    if !BUILTIN_NAMES.contains(&s.name.as_str()) {
        return Err(CliError::Config(format!(
            "unknown problem `{}`; expected one of {}",
            s.name,
            BUILTIN_NAMES.join(", ")
        )));
    }
    let allowed = allowed_keys(&s.name);
    if let Some(k) = present_keys(s).into_iter().find(|k| !allowed.contains(k)) {
        return Err(CliError::Config(format!(
            "key `problem.{k}` does not apply to {}",
            s.name
        )));
    }
    let d = s.dim;
    let sampled =
        |r: hjpi::Result<SampledProblem>| r.map(BuiltinProblem::Sampled).map_err(CliError::from);
    match s.name.as_str() {
        "paper_example" => {
            let mut p = ExampleParams::new(d, length);
            p.potential = s.potential.unwrap_or(p.potential);
            p.terminal = s.terminal.unwrap_or(p.terminal);
            p.sigma = s.sigma.unwrap_or(p.sigma);
            p.ball_resolution = s.resolution.unwrap_or(p.ball_resolution);
            Ok(paper_example(&p, s.closed_form.unwrap_or(true))?)
        }
        "transport_convex" => {
            let mut p = TransportParams::new(d, length);
            p.potential = s.potential.unwrap_or(p.potential);
            p.terminal = s.terminal.unwrap_or(p.terminal);
            p.sigma = s.sigma.unwrap_or(p.sigma);
            p.wind = s.wind.unwrap_or(p.wind);
            p.resolution = s.resolution.unwrap_or(p.resolution);
            sampled(transport_convex(&p))
        }
        "nondegenerate_smooth" => sampled(nondegenerate_smooth(&game_params(
            s,
            SmoothGameParams::nondegenerate(d, length),
        ))),
        _ => sampled(degenerate_smooth(&game_params(
            s,
            SmoothGameParams::degenerate(d, length),
        ))),
    }
}
