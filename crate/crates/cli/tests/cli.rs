use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rollover::model::{build_consistent_vasicek, build_constant_coefficient};
use rollover::risk::AssetMarketSpec;
use rollover::{CoefficientField, FactorModelSpec};
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn rollover(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rollover"));
    cmd.args(args).env_remove("ROLLOVER_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn check_passed(m: &Value, name: &str) -> bool {
    m["checks"]
        .as_array()
        .unwrap()
        .iter()
        .any(|c| c["name"] == name && c["passed"] == true)
}

#[test]
fn shipped_configs_match_builders() {
    let load = |name: &str| FactorModelSpec::from_json(&fs::read_to_string(configs().join(name)).unwrap()).unwrap();
    let vasicek = |phi| build_consistent_vasicek(1.0, 0.05, 0.1, 2.0, phi, 0.05).unwrap();
    assert_eq!(load("vasicek_single_curve.json"), vasicek(CoefficientField::constant(0.0)));
    assert_eq!(load("vasicek_constant_spread.json"), vasicek(CoefficientField::constant(0.02)));
    assert_eq!(
        load("vasicek_quadratic_spread.json"),
        vasicek(CoefficientField::quadratic_1d(0.05, 0.01, 0.001))
    );
    let base = build_constant_coefficient(0.02, 0.3, 0.2, CoefficientField::constant(0.0), 0.0).unwrap();
    assert_eq!(load("constant_market_model.json"), base);
    let market = AssetMarketSpec::from_json(&fs::read_to_string(configs().join("constant_market.json")).unwrap()).unwrap();
    assert_eq!(market, AssetMarketSpec::implied_by(&base, vec![0.2]).unwrap());
}

#[test]
fn check_model_on_consistent_vasicek() {
    let out = tempfile::tempdir().unwrap();
    let o = rollover(
        &["check-model", "--model", &config("vasicek_single_curve.json"), "--out", out.path().to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(out.path());
    assert_eq!(m["status"], "pass");
    assert!(m["resolved"]["max_relative_residual"].as_f64().unwrap() <= 1e-6);
    assert!(out.path().join("residuals.json").exists());
}

#[test]
fn inconsistent_model_exits_with_check_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = build_consistent_vasicek(1.0, 0.05, 0.1, 2.0, CoefficientField::constant(0.0), 0.05).unwrap();
    model.theta = CoefficientField::constant(0.3);
    let path = dir.path().join("bad.json");
    fs::write(&path, model.to_json().unwrap()).unwrap();
    let out = dir.path().join("out");
    let o = rollover(&["check-model", "--model", path.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    let m = manifest(&out);
    assert_eq!(m["status"], "fail");
    assert!(!check_passed(&m, "gop_consistency"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL gop_consistency"));
}

#[test]
fn single_curve_report_collapses() {
    let out = tempfile::tempdir().unwrap();
    let o = rollover(
        &[
            "curve",
            "--model",
            &config("vasicek_single_curve.json"),
            "--out",
            out.path().to_str().unwrap(),
            "--grid",
            "100,100",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.path().join("curve.json")).unwrap()).unwrap();
    for row in report["maturities"].as_array().unwrap() {
        assert!((row["spot_spread"].as_f64().unwrap() - 1.0).abs() <= 1e-10);
    }
    for row in report["tenors"].as_array().unwrap() {
        let (l, f) = (row["forward_term_rate"].as_f64().unwrap(), row["simple_forward"].as_f64().unwrap());
        assert!((l - f).abs() <= 1e-10);
    }
    assert!(check_passed(&manifest(out.path()), "single_curve"));
    let csv = fs::read_to_string(out.path().join("spread_vs_maturity.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("T,S,L,F"));
}

#[test]
fn verify_control_on_constant_spread() {
    let out = tempfile::tempdir().unwrap();
    let o = rollover(
        &[
            "verify-control",
            "--model",
            &config("vasicek_constant_spread.json"),
            "--out",
            out.path().to_str().unwrap(),
            "--etas",
            "0.5,2",
            "--grid",
            "120,60",
            "--paths",
            "500",
            "--dt",
            "0.01",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(out.path());
    assert!(check_passed(&m, "spot.sandwich"));
    assert!(check_passed(&m, "spot.identity"));
    assert!(check_passed(&m, "forward.terminal"));
    let spot: Value = serde_json::from_str(&fs::read_to_string(out.path().join("verify_spot.json")).unwrap()).unwrap();
    for row in spot["identities"].as_array().unwrap() {
        assert!(row["error"].as_f64().unwrap() < 1e-6);
    }
    let csv = fs::read_to_string(out.path().join("eta_identity.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn configuration_errors_exit_with_two_and_leave_a_manifest() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let o = rollover(&["curve", "--out", dir], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(manifest(out.path())["status"], "config_error");

    let o = rollover(&["solve", "--model", "/nonexistent/model.json", "--out", dir], &[]);
    assert_eq!(o.status.code(), Some(2));

    let o = rollover(&["solve", "--grid", "12", "--out", dir], &[]);
    assert_eq!(o.status.code(), Some(2));
    let m = manifest(out.path());
    assert_eq!(m["status"], "config_error");
    assert!(m["error"].as_str().unwrap().contains("--grid"));

    let o = rollover(
        &["verify-control", "--model", &config("vasicek_constant_spread.json"), "--etas", "0.5", "--out", dir],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_comes_from_environment() {
    let out = tempfile::tempdir().unwrap();
    let args = [
        "simulate",
        "--model",
        &config("vasicek_quadratic_spread.json"),
        "--out",
        out.path().to_str().unwrap(),
        "--paths",
        "20",
    ];
    rollover(&args, &[("ROLLOVER_SEED", "7")]);
    assert_eq!(manifest(out.path())["resolved"]["seed"], 7);
    rollover(&args, &[]);
    assert_eq!(manifest(out.path())["resolved"]["seed"], 42);
}

#[test]
fn artifacts_identical_across_worker_counts() {
    let run = |threads: &str, extra: &[&str]| {
        let out = tempfile::tempdir().unwrap();
        let dir = out.path().to_str().unwrap().to_string();
        for cmd in ["simulate", "curve"] {
            let mut args: Vec<String> = [
                cmd.to_string(),
                "--model".into(),
                config("vasicek_quadratic_spread.json"),
                "--out".into(),
                format!("{dir}/{cmd}"),
            ]
            .into();
            args.extend(["--paths", "400", "--dt", "0.01", "--method", "mc", "--maturities", "0.5,1"].map(String::from));
            args.extend(extra.iter().map(|s| s.to_string()));
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let o = rollover(&args, &[("RAYON_NUM_THREADS", threads)]);
            assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        }
        let read = |p: &str| fs::read(out.path().join(p)).unwrap();
        vec![read("simulate/paths.csv"), read("simulate/drift.json"), read("curve/curve.json"), read("curve/curve.csv")]
    };
    let one = run("1", &[]);
    assert_eq!(one, run("8", &[]));
    assert_eq!(one, run("1", &["--sequential"]));
}
