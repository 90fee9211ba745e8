use std::path::Path;
use std::process::{Command, Output};

use plzip::cli::FitDocument;

fn plzip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plzip")).args(args).output().expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn simulate(dir: &Path, scheme: &str, n: usize, seed: u64, name: &str) -> String {
    let out = path(dir, name);
    let n = n.to_string();
    let seed = seed.to_string();
    let r = plzip(&["simulate", "--scheme", scheme, "--n", &n, "--seed", &seed, "--out", &out]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    out
}

#[test]
fn fit_round_trip_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "c0", 300, 5, "c0.csv");
    let doc_path = path(dir.path(), "fit.json");
    let r = plzip(&["fit", "--data", &data, "--loss", "ml", "--bandwidth", "0.2", "--out", &doc_path]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));

    let text = std::fs::read_to_string(&doc_path).unwrap();
    let doc = FitDocument::from_json(&text).unwrap();
    assert!(doc.converged);
    assert_eq!(doc.columns.x, vec!["x1", "x2"]);
    assert_eq!(doc.columns.z, vec!["z1", "z2"]);
    assert_eq!(doc.gamma.len(), 3);
    assert_eq!(doc.to_json().unwrap(), text);

    let pred = path(dir.path(), "pred.csv");
    let r = plzip(&["predict", "--fit", &doc_path, "--data", &data, "--out", &pred]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let lines: Vec<String> = std::fs::read_to_string(&pred).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 301);
    assert_eq!(lines[0], "row,t,m,pi,lambda,mean,y,w");
}

#[test]
fn robust_fit_converges_on_simulated_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "c1", 300, 6, "c1.csv");
    let doc_path = path(dir.path(), "fit.json");
    let r = plzip(&["fit", "--data", &data, "--loss", "mt", "--bandwidth", "0.2", "--out", &doc_path]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let doc = FitDocument::from_json(&std::fs::read_to_string(&doc_path).unwrap()).unwrap();
    assert!((doc.beta[0] - 2.0).abs() < 0.5 && (doc.beta[1] - 2.0).abs() < 0.5);
}

#[test]
fn unconverged_fit_exits_with_two_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "c0", 200, 7, "c0.csv");
    let doc_path = path(dir.path(), "fit.json");
    let r = plzip(&[
        "fit", "--data", &data, "--loss", "ml", "--bandwidth", "0.2", "--max-iter", "1", "--tol-param", "1e-12", "--out", &doc_path,
    ]);
    assert_eq!(r.status.code(), Some(2));
    let doc = FitDocument::from_json(&std::fs::read_to_string(&doc_path).unwrap()).unwrap();
    assert!(!doc.converged);
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = path(dir.path(), "bad.csv");
    std::fs::write(&bad, "y,x1,z1,t\n1,0.1,0.2,0\n2.5,0.3,0.1,1\n").unwrap();
    let out = path(dir.path(), "fit.json");
    let r = plzip(&["fit", "--data", &bad, "--loss", "ml", "--bandwidth", "0.5", "--out", &out]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 3"));

    let data = simulate(dir.path(), "c0", 50, 1, "c0.csv");
    let r = plzip(&["fit", "--data", &data, "--loss", "ml", "--out", &out]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--bandwidth"));

    let r = plzip(&["fit", "--data", &data, "--x", "x9", "--loss", "ml", "--bandwidth", "0.5", "--out", &out]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("x9"));

    let r = plzip(&["fit", "--data", &data]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "c1", 500, 7, "a.csv");
    let b = simulate(dir.path(), "c1", 500, 7, "b.csv");
    let text = std::fs::read(&a).unwrap();
    assert_eq!(text, std::fs::read(&b).unwrap());
    let header = String::from_utf8(text).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "y,x1,x2,z1,z2,t,truth_w,truth_m,truth_contaminated");
}

#[test]
fn check_reports_fisher_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "check.csv");
    let r = plzip(&["check", "--loss", "ml", "--out", &out]);
    assert!(r.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(v.abs() <= 1e-10);
        rows += 1;
    }
    assert_eq!(rows, 21);
}

#[test]
fn small_study_emits_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "rows.csv");
    let summary = path(dir.path(), "summary.csv");
    let r = plzip(&[
        "study", "--schemes", "c0,c1", "--losses", "ml,mt", "--reps", "5", "--n", "200", "--seed", "3", "--bandwidth", "0.2",
        "--out", &out, "--summary", &summary,
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rows = std::fs::read_to_string(&out).unwrap();
    assert_eq!(rows.lines().count(), 21);
    assert_eq!(std::fs::read_to_string(&summary).unwrap().lines().count(), 5);
}

#[test]
fn cv_and_prediction_error_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "c0", 200, 8, "c0.csv");
    let curve = path(dir.path(), "curve.csv");
    let r = plzip(&["cv", "--data", &data, "--loss", "ml", "--grid", "0.1,0.2,0.4", "--out", &curve]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let h: f64 = String::from_utf8_lossy(&r.stdout).trim().parse().unwrap();
    assert!([0.1, 0.2, 0.4].contains(&h));
    assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 4);

    let out = path(dir.path(), "pe.csv");
    let r = plzip(&["study", "--data", &data, "--losses", "ml", "--bandwidth", "0.3", "--out", &out]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
}
