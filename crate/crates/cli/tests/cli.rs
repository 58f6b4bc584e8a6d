use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quasigee"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn fit_config(dir: &Path, data: &Path, method: &str) -> PathBuf {
    let body = format!(r#"{{"data": {:?}, "link": "linear", "method": {method}}}"#, data.display().to_string());
    write_config(dir, "fit.json", &body)
}

#[test]
fn fit_reproduces_fixture_ols() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fit_config(dir.path(), &fixture("ols.csv"), r#"{"method": "indep"}"#);
    let out = dir.path().join("out");
    let o = run(&["fit"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let fit = read_json(&out.join("fit.json"));
    let expected = read_json(&fixture("ols_expected.json"));
    for (a, b) in fit["beta"].as_array().unwrap().iter().zip(expected["beta"].as_array().unwrap()) {
        assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-10);
    }
    assert_eq!(fit["converged"], Value::Bool(true));
    assert_eq!(fit["config_hash"].as_str().unwrap().len(), 64);
    assert!(out.join("fit_trace.csv").exists());
}

#[test]
fn fit_aqs_converges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fit_config(dir.path(), &fixture("ols.csv"), r#"{"method": "aqs", "burn_in": 6}"#);
    let out = dir.path().join("out");
    let o = run(&["fit", "--json"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["converged"], Value::Bool(true));
    let trace = std::fs::read_to_string(out.join("fit_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,g_norm,step_norm,halvings,fallback\n"));
    assert!(trace.lines().count() > 1);
}

#[test]
fn corrupt_dataset_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fit_config(dir.path(), &fixture("ols_missing_row.csv"), r#"{"method": "indep"}"#);
    let o = run(&["fit"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line"), "{err}");
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"data": "x.csv", "link": "linear", "method": {"method": "indep"}, "extra": 1}"#,
    );
    assert_eq!(run(&["fit"], &cfg, &dir.path().join("out")).status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_quasigee")).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn rank_deficient_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("ols.csv")).unwrap();
    let dup: String = text
        .lines()
        .enumerate()
        .map(|(k, l)| {
            if k == 0 {
                format!("{l},x4\n")
            } else {
                let x2 = l.split(',').nth(4).unwrap().to_string();
                format!("{l},{x2}\n")
            }
        })
        .collect();
    let data = dir.path().join("dup.csv");
    std::fs::write(&data, dup).unwrap();
    let cfg = fit_config(dir.path(), &data, r#"{"method": "indep"}"#);
    assert_eq!(run(&["fit"], &cfg, &dir.path().join("out")).status.code(), Some(4));
}

fn column(csv_text: &str, name: &str) -> Vec<String> {
    let mut lines = csv_text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(k).unwrap().to_string()).collect()
}

#[test]
fn diagnose_linear_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        r#"{{"data": {:?}, "link": "linear", "method": {{"method": "indep"}}, "r": 0.25, "delta": 0.2, "n_grid": [10, 20, 30]}}"#,
        fixture("ols.csv").display().to_string()
    );
    let cfg = write_config(dir.path(), "diag.json", &body);
    let out = dir.path().join("out");
    let o = run(&["diagnose"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = std::fs::read_to_string(out.join("diagnostics_grid.csv")).unwrap();
    assert_eq!(column(&grid, "n"), ["10", "20", "30"]);
    assert!(column(&grid, "eta").iter().all(|v| v == "0"));
    assert!(column(&grid, "q").iter().all(|v| v == "0"));
    let doc = read_json(&out.join("diagnostics.json"));
    assert_eq!(doc["r"].as_f64(), Some(0.25));
    assert_eq!(doc["delta"].as_f64(), Some(0.2));
    assert_eq!(doc["config"]["r"].as_f64(), Some(0.25));
}

#[test]
fn diagnose_gee_has_zero_q() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        r#"{{"data": {:?}, "link": "linear", "method": {{"method": "gee", "correlation": {{"structure": "ar1", "alpha": 0.4}}}}}}"#,
        fixture("ols.csv").display().to_string()
    );
    let cfg = write_config(dir.path(), "diag.json", &body);
    let out = dir.path().join("out");
    assert_eq!(run(&["diagnose"], &cfg, &out).status.code(), Some(0));
    let grid = std::fs::read_to_string(out.join("diagnostics_grid.csv")).unwrap();
    assert!(column(&grid, "q").iter().all(|v| v == "0"));
    assert!(column(&grid, "rho").iter().all(|v| v == "0"));
}

const GENERATOR: &str = r#"{"n": 40, "m": 3, "p": 2, "link": "logistic", "beta0": [0.4, -0.3],
    "correlation": {"structure": "exchangeable", "alpha": 0.4}, "seed": 1}"#;

#[test]
fn simulate_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.json", &format!(r#"{{"generator": {GENERATOR}}}"#));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["simulate"], &cfg, &a).status.code(), Some(0));
    assert_eq!(run(&["simulate", "--workers", "3"], &cfg, &b).status.code(), Some(0));
    let da = std::fs::read(a.join("data.csv")).unwrap();
    assert_eq!(da, std::fs::read(b.join("data.csv")).unwrap());
    assert_eq!(String::from_utf8(da).unwrap().lines().count(), 1 + 40 * 3);
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["config"]["generator"]["correlation"]["structure"], "exchangeable");
    assert_eq!(manifest["correlation"]["alpha"].as_f64(), Some(0.4));
    assert_eq!(manifest["rows"].as_u64(), Some(120));
}

#[test]
fn compare_single_method_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(r#"{{"generator": {GENERATOR}, "methods": [{{"method": "indep"}}], "reps": 12}}"#);
    let cfg = write_config(dir.path(), "cmp.json", &body);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["compare"], &cfg, &a).status.code(), Some(0));
    assert_eq!(run(&["compare"], &cfg, &b).status.code(), Some(0));
    let sa = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(sa.lines().count(), 2);
    for f in ["summary.csv", "results.csv", "plot_data.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn compare_rejects_few_reps() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(r#"{{"generator": {GENERATOR}, "methods": [{{"method": "indep"}}], "reps": 9}}"#);
    let cfg = write_config(dir.path(), "cmp.json", &body);
    let o = run(&["compare"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reps"));
}
