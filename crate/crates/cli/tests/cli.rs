use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn hjpi(cmd: &str, config: &str, dir: &TempDir, extra: &[&str]) -> Output {
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_hjpi"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const ZERO_TRANSPORT: &str = r#"
[problem]
name = "transport_convex"
dim = 1
potential = 0.0
terminal = 0.0

[grid]
cells = 16
horizon = 0.2
"#;

#[test]
fn zero_cost_constant_terminal_keeps_the_terminal_data() {
    let dir = TempDir::new().unwrap();
    let o = hjpi("solve", ZERO_TRANSPORT, &dir, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("out/solve_snapshots.csv"));
    assert_eq!(header, ["t", "level", "x1", "value"]);
    assert_eq!(rows.len(), 2 * 16);
    for r in &rows {
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn paper_example_solve_respects_the_uniform_bound() {
    let dir = TempDir::new().unwrap();
    let cfg = "[problem]\nname = \"paper_example\"\ndim = 2\n[grid]\ncells = 16\nhorizon = 0.3\n";
    let o = hjpi("solve", cfg, &dir, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(&dir.path().join("out/solve_summary.json"));
    let sup = s["sup_norm"].as_f64().unwrap();
    // ‖g‖ = 2 · 0.5, ‖c‖ = 1 + 0.5.
    assert!(sup <= 1.0 + 1.5 * 0.3 + 1e-12, "{sup}");
    assert_eq!(s["uniform_bound_holds"], true);
    assert!(
        s["params"]["certificate"]["cfl"]["lhs"].as_f64().unwrap()
            <= s["params"]["certificate"]["cfl"]["rhs"].as_f64().unwrap()
    );
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let dir = TempDir::new().unwrap();
    let o = hjpi(
        "solve",
        &format!("{ZERO_TRANSPORT}\n[scheme]\ncfl_margin = 0.9\nbogus_key = 1\n"),
        &dir,
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));

    let cfg = ZERO_TRANSPORT.replace("potential = 0.0", "potential = 0.0\nkappa_a = 1.0");
    let o = hjpi("solve", &cfg, &dir, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("problem.kappa_a"), "{}", stderr(&o));

    let o = hjpi(
        "solve",
        &ZERO_TRANSPORT.replace("transport_convex", "nope"),
        &dir,
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infeasible_time_step_names_the_condition() {
    let dir = TempDir::new().unwrap();
    let o = hjpi(
        "solve",
        &format!("{ZERO_TRANSPORT}\n[scheme]\ncfl_margin = 0.9\ntau = 0.1\n"),
        &dir,
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("(N2)"), "{}", stderr(&o));

    let o = hjpi(
        "pi",
        &format!("{ZERO_TRANSPORT}\n[scheme]\ncfl_margin = 0.9\ntau = 0.001\n"),
        &dir,
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("(N4)") || stderr(&o).contains("(N3)"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn singleton_controls_converge_immediately() {
    let dir = TempDir::new().unwrap();
    let cfg = ZERO_TRANSPORT.replace("terminal = 0.0", "terminal = 0.5\nresolution = 1");
    let o = hjpi("pi", &cfg, &dir, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("out/pi.csv"));
    assert_eq!(
        header,
        ["n", "sup_err", "grad_err_max", "ham_res", "log2_bound"]
    );
    assert_eq!(rows.len(), 1);
    let s = json(&dir.path().join("out/pi_summary.json"));
    let scale = s["oracle_sup_norm"].as_f64().unwrap().max(1.0);
    assert!(rows[0][1].parse::<f64>().unwrap() <= 1e-14 * scale);
}

#[test]
fn pi_csv_has_one_row_per_iteration_and_decays() {
    let dir = TempDir::new().unwrap();
    let cfg = "[problem]\nname = \"paper_example\"\ndim = 1\n[grid]\ncells = 32\nhorizon = 0.1\n";
    let o = hjpi("pi", cfg, &dir, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = read_csv(&dir.path().join("out/pi.csv"));
    let s = json(&dir.path().join("out/pi_summary.json"));
    assert_eq!(rows.len() as u64, s["iterations"].as_u64().unwrap());
    let errs: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0]));
    assert!(*errs.last().unwrap() < 1e-10);
    assert!(s["c1"].as_f64().is_some() && s["log_c_h"].as_f64().is_some());
}

const STUDY: &str = r#"
[problem]
name = "nondegenerate_smooth"
dim = 1

[grid]
horizon = 0.05

[study]
regime = "nondegenerate"
alpha = 0.9
h_list = [0.03125, 0.015625, 0.0078125]
h_ref = 0.001953125
"#;

#[test]
fn study_csv_has_one_row_per_level_plus_the_fit() {
    let dir = TempDir::new().unwrap();
    let o = hjpi("study", STUDY, &dir, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("out/study.csv"));
    assert_eq!(header[0], "kind");
    assert_eq!(rows.len(), 3 + 1);
    assert!(rows[..3].iter().all(|r| r[0] == "level"));
    assert_eq!(rows[3][0], "fit");
    assert_eq!(rows[3][7].parse::<f64>().unwrap(), 0.45);
    assert!(rows[3][6].parse::<f64>().is_ok());
}

#[test]
fn study_needs_three_levels() {
    let dir = TempDir::new().unwrap();
    let o = hjpi(
        "study",
        &STUDY.replace("[0.03125, 0.015625, 0.0078125]", "[0.03125, 0.015625]"),
        &dir,
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("need ≥ 3 levels"), "{}", stderr(&o));
}

#[test]
fn check_writes_one_row_per_suite_with_the_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = "[problem]\nname = \"nondegenerate_smooth\"\ndim = 1\n[grid]\ncells = 16\nhorizon = 0.05\n[check]\nseed = 3\ntrials = 20\ncomparison_trials = 1\nlipschitz_samples = 500\nlipschitz_radius = 2.0\n";
    let o = hjpi("check", cfg, &dir, &[]);
    let (header, rows) = read_csv(&dir.path().join("out/check.csv"));
    assert_eq!(
        header,
        ["suite", "status", "max_violation", "samples", "seed"]
    );
    let suites: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        suites,
        [
            "monotonicity",
            "comparison",
            "uniform_bound",
            "hamiltonian_lipschitz",
            "bernstein",
            "pi_difference"
        ]
    );
    assert!(rows.iter().all(|r| r[4] == "3"));
    for r in &rows[..5] {
        assert_eq!(r[1], "pass", "{r:?}");
    }
    let all_pass = rows.iter().all(|r| r[1] == "pass");
    assert_eq!(o.status.success(), all_pass);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let cfg =
        "[problem]\nname = \"nondegenerate_smooth\"\ndim = 2\n[grid]\ncells = 12\nhorizon = 0.05\n";
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert!(hjpi("pi", cfg, &a, &["--threads", "1"]).status.success());
    assert!(hjpi("pi", cfg, &b, &["--threads", "4"]).status.success());
    for f in ["pi.csv", "pi_summary.json"] {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}
