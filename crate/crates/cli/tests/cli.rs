use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        f.write("x.csv", "1,0\n0,1\n0,0\n");
        f.write("y.csv", "1\n2\n3\n");
        f.write("y_range.csv", "1\n2\n0\n");
        f.write("beta0.csv", "1,2\n");
        f
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let path = self.dir.path().join(name);
        fs::write(&path, text).unwrap();
        path
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }
}

fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sketchuq"));
    cmd.args(args).env_remove("SKETCHUQ_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn solve_fixture() {
    let f = Fixture::new();
    let v = json(&run(&["solve", "--x", &f.path("x.csv"), "--y", &f.path("y.csv")]));
    assert_eq!(v["n"], 3);
    assert_eq!(v["p"], 2);
    assert!(close(&floats(&v["betaHat"]), &[1.0, 2.0], 1e-14));
    assert!((v["residualNorm"].as_f64().unwrap() - 3.0).abs() < 1e-14);
    assert!((v["cosTheta"].as_f64().unwrap() - (5.0f64 / 14.0).sqrt()).abs() < 1e-14);
}

#[test]
fn consistent_response_has_no_residual() {
    let f = Fixture::new();
    let v = json(&run(&["solve", "--x", &f.path("x.csv"), "--y", &f.path("y_range.csv")]));
    assert!(v["residualNorm"].as_f64().unwrap() < 1e-14);
    assert_eq!(v["cosTheta"].as_f64().unwrap(), 1.0);
}

#[test]
fn header_lines_are_skipped() {
    let f = Fixture::new();
    f.write("xh.csv", "a,b\n1,0\n0,1\n0,0\n");
    f.write("yh.csv", "y\n1\n2\n3\n");
    let v = json(&run(&["solve", "--x", &f.path("xh.csv"), "--y", &f.path("yh.csv"), "--header"]));
    assert!(close(&floats(&v["betaHat"]), &[1.0, 2.0], 1e-14));
}

#[test]
fn malformed_csv_exits_with_parse_code() {
    let f = Fixture::new();
    f.write("bad.csv", "1,0\n0,x\n0,0\n");
    let out = run(&["solve", "--x", &f.path("bad.csv"), "--y", &f.path("y.csv")]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 2") && err.contains("column 2"), "{err}");
}

#[test]
fn mismatched_lengths_are_rejected() {
    let f = Fixture::new();
    f.write("y2.csv", "1\n2\n");
    let out = run(&["solve", "--x", &f.path("x.csv"), "--y", &f.path("y2.csv")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_row_sketch_loses_rank() {
    let f = Fixture::new();
    let v = json(&run(&[
        "sketch", "--x", &f.path("x.csv"), "--y", &f.path("y.csv"), "--scheme", "unif", "--r", "1", "--seed", "4",
    ]));
    assert_eq!(v["diagnostics"]["rankPreserved"], false);
    assert_eq!(v["diagnostics"]["kappaP0"], "inf");
    assert_eq!(v["nullSpaceConsistent"], true);
    assert!(v["identityGap"].as_f64().unwrap() < 1e-12);
}

#[test]
fn sketch_is_reproducible_from_the_seed() {
    let f = Fixture::new();
    let args = ["sketch", "--x", &f.path("x.csv"), "--y", &f.path("y.csv"), "--scheme", "norm", "--r", "2", "--seed", "11"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn identity_sketch_matches_solve() {
    let f = Fixture::new();
    let s = json(&run(&["solve", "--x", &f.path("x.csv"), "--y", &f.path("y.csv")]));
    let k = json(&run(&[
        "sketch", "--x", &f.path("x.csv"), "--y", &f.path("y.csv"), "--scheme", "identity", "--seed", "0",
    ]));
    assert!(close(&floats(&k["betaTilde"]), &floats(&s["betaHat"]), 1e-14));
    assert!(k["devPPx"].as_f64().unwrap() < 1e-14);
}

#[test]
fn full_size_uniform_sketch_matches_solve_when_rank_is_kept() {
    let f = Fixture::new();
    let s = json(&run(&["solve", "--x", &f.path("x.csv"), "--y", &f.path("y_range.csv")]));
    let mut kept = 0;
    for seed in 0..20 {
        let seed = seed.to_string();
        let k = json(&run(&[
            "sketch", "--x", &f.path("x.csv"), "--y", &f.path("y_range.csv"), "--scheme", "unif", "--r", "3", "--seed", &seed,
        ]));
        if k["diagnostics"]["rankPreserved"] == true {
            kept += 1;
            assert!(close(&floats(&k["betaTilde"]), &floats(&s["betaHat"]), 1e-12));
        }
    }
    assert!(kept > 0);
}

#[test]
fn missing_seed_is_a_usage_error() {
    let f = Fixture::new();
    let out = run(&["sketch", "--x", &f.path("x.csv"), "--y", &f.path("y.csv"), "--scheme", "unif", "--r", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_scheme_is_rejected() {
    let f = Fixture::new();
    let out = run(&["sketch", "--x", &f.path("x.csv"), "--y", &f.path("y.csv"), "--scheme", "srht", "--r", "2", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn entropy_seed_is_echoed() {
    let f = Fixture::new();
    let v = json(&run(&[
        "sketch", "--x", &f.path("x.csv"), "--y", &f.path("y.csv"), "--scheme", "unif", "--r", "2", "--seed-from-entropy",
    ]));
    assert!(v["seed"].is_u64());
}

#[test]
fn diagnose_reports_probability() {
    let f = Fixture::new();
    let v = json(&run(&[
        "diagnose", "--x", &f.path("x.csv"), "--y", &f.path("y.csv"), "--scheme", "unif", "--r", "1", "--seed", "3",
        "--replicates", "50",
    ]));
    assert_eq!(v["prRankPreserved"].as_f64().unwrap(), 0.0);
    assert_eq!(v["nReplicates"], 50);
}

#[test]
fn identity_uq_has_no_excess() {
    let f = Fixture::new();
    let v = json(&run(&[
        "uq", "--x", &f.path("x.csv"), "--beta0", &f.path("beta0.csv"), "--sigma2", "0.5", "--scheme", "identity",
        "--draws", "10", "--seed", "1",
    ]));
    let report = &v["report"];
    assert!(floats(&report["excessBias"]).iter().all(|b| b.abs() < 1e-14));
    assert!(report["mseExcess"].as_f64().unwrap().abs() < 1e-14);
    assert!((report["mseModel"].as_f64().unwrap() - 1.0).abs() < 1e-14);
    assert!((report["riskModel"].as_f64().unwrap() - 1.0).abs() < 1e-14);
}

#[test]
fn rank_conditioning_below_p_fails() {
    let f = Fixture::new();
    let out = run(&[
        "uq", "--x", &f.path("x.csv"), "--beta0", &f.path("beta0.csv"), "--sigma2", "0.5", "--scheme", "unif",
        "--r", "1", "--seed", "1", "--rank-conditioned",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn uq_requires_beta0() {
    let f = Fixture::new();
    let out = run(&["uq", "--x", &f.path("x.csv"), "--sigma2", "0.5", "--scheme", "unif", "--r", "2", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn uq_with_oracle_reports_agreement() {
    let f = Fixture::new();
    let v = json(&run(&[
        "uq", "--x", &f.path("x.csv"), "--beta0", &f.path("beta0.csv"), "--sigma2", "0.5", "--scheme", "unif",
        "--r", "2", "--seed", "2", "--draws", "400", "--oracle", "200",
    ]));
    let rows = v["agreement"].as_array().unwrap();
    assert!(!rows.is_empty());
    for row in rows {
        assert!(row["ratio"].as_f64().unwrap() < 4.0, "{row}");
    }
}

fn experiment_config(f: &Fixture) -> PathBuf {
    let text = format!(
        r#"{{
  "schemes": ["unif", "lev", "norm"],
  "rGrid": [3, 6, 9],
  "nReplicates": 4,
  "masterSeed": 99,
  "dataSource": {{ "synthetic": {{ "n": 60, "p": 4, "coherence": 0.5 }} }},
  "outputs": {{ "records": "{}", "summary": "{}" }},
  "deterministic": true
}}"#,
        f.path("out/records.csv"),
        f.path("out/summary.csv")
    );
    f.write("config.json", &text)
}

fn csv_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn experiment_from_config_file() {
    let f = Fixture::new();
    let config = experiment_config(&f);
    let v = json(&run(&["experiment", "--config", config.to_str().unwrap()]));
    assert_eq!(v["nRecords"], 36);
    let records = csv_lines(&f.dir.path().join("out/records.csv"));
    assert_eq!(records.len(), 37);
    assert!(records[0].starts_with("scheme,r,replicate,seed,rank_preserved,kappa_p0"));
    assert!(records[1..].iter().all(|l| l.ends_with(",0")));
    let summary = csv_lines(&f.dir.path().join("out/summary.csv"));
    assert_eq!(summary.len(), 10);
    // r = 3 < p = 4 never preserves rank.
    assert!(summary.iter().filter(|l| l.contains(",3,")).all(|l| l.split(',').nth(2) == Some("0.0")));
}

#[test]
fn malformed_config_exits_with_parse_code() {
    let f = Fixture::new();
    let config = f.write("config.json", "{ \"masterSeed\": 1, ");
    let out = run(&["experiment", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let config = f.write("typo.json", r#"{ "masterSeed": 1, "dataSource": { "synthetic": { "n": 10, "p": 2 } }, "rgrid": [1] }"#);
    assert_eq!(run(&["experiment", "--config", config.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn experiment_from_flags_and_csv() {
    let f = Fixture::new();
    let records = f.path("flags.csv");
    let v = json(&run(&[
        "--deterministic", "experiment", "--x", &f.path("x.csv"), "--y", &f.path("y.csv"), "--schemes", "unif,norm",
        "--r-grid", "1,2,3", "--replicates", "5", "--seed", "7", "--records", &records,
    ]));
    assert_eq!(v["nRecords"], 30);
    assert_eq!(csv_lines(Path::new(&records)).len(), 31);
}

#[test]
fn thread_count_does_not_change_results() {
    let base = [
        "--deterministic", "experiment", "--n", "40", "--p", "3", "--coherence", "0.7", "--r-grid", "2,4,8",
        "--replicates", "6", "--seed", "5",
    ];
    let one = run(&[&["--threads", "1"][..], &base[..]].concat());
    let env = run_env(&base, &[("SKETCHUQ_THREADS", "4")]);
    assert!(one.status.success() && env.status.success());
    assert_eq!(one.stdout, env.stdout);
    let zero = run_env(&base, &[("SKETCHUQ_THREADS", "0")]);
    assert_eq!(zero.status.code(), Some(2));
}
