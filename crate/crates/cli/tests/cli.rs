use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mera_core::calibration::CalibrationResult;
use mera_core::eval_report::parse_report;
use mera_core::steering::SteeringTestVectors;

fn mera(args: &[&str]) -> Output {
    mera_env(args, None)
}

fn mera_env(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mera"));
    cmd.args(args).env_remove("MERA_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("MERA_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

const PLANTED: &str = r#"{
  "data": {"n_train": 400, "n_cal": 250, "n_test": 100},
  "modes": ["last"],
  "methods": ["no_steering", "base_p", "mera"]
}"#;

const SHUFFLED: &str = r#"{
  "data": {"n_train": 400, "n_cal": 250, "n_test": 100, "shuffle_labels": true},
  "modes": ["last"],
  "methods": ["no_steering", "mera"]
}"#;

const TINY: &str = r#"{
  "data": {"n_train": 40, "n_cal": 10, "n_test": 10},
  "modes": ["last"],
  "methods": ["no_steering", "mera"]
}"#;

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_is_deterministic_and_prints_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), PLANTED);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = mera(&["run", "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stdout(&o).lines().count(), 1);
    }
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    assert!(files.iter().any(|f| f.ends_with("activations.bin")));
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{} differs", f.display());
    }

    let report = parse_report(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 3);
    let mera_row = report.rows.iter().find(|r| r.method == "mera").unwrap();
    assert!(mera_row.delta_accuracy > 0.0);
}

#[test]
fn stages_run_separately_and_abstention_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SHUFFLED);
    let out = tmp.path().join("nested/out");
    let c = config.to_str().unwrap();
    let o = out.to_str().unwrap();
    for stage in ["cache", "train-probes", "calibrate"] {
        let res = mera(&[stage, "--config", c, "--out", o]);
        assert!(res.status.success(), "{stage}: {}", stderr(&res));
    }
    let result: CalibrationResult = serde_json::from_str(&fs::read_to_string(out.join("calibration/last/result.json")).unwrap()).unwrap();
    assert!(result.abstained);
    let policy = fs::read_to_string(out.join("calibration/last/policy.json")).unwrap();
    assert!(policy.contains("\"abstained\": true"));

    let res = mera(&["evaluate", "--config", c, "--out", o]);
    assert!(res.status.success(), "{}", stderr(&res));
    let report = parse_report(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let row = report.rows.iter().find(|r| r.method == "mera").unwrap();
    assert_eq!(row.accuracy_after, row.accuracy_before);
    assert_eq!(row.error_after, row.error_before);
}

#[test]
fn delta_monotonicity_of_valid_candidates() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), PLANTED);
    let (c, out) = (config.to_str().unwrap(), tmp.path().join("o"));
    let o = out.to_str().unwrap();
    for stage in ["cache", "train-probes"] {
        assert!(mera(&[stage, "--config", c, "--out", o]).status.success());
    }
    let valid = |delta: &str| -> Vec<bool> {
        let res = mera(&["calibrate", "--config", c, "--out", o, "--delta", delta]);
        assert!(res.status.success(), "{}", stderr(&res));
        let result: CalibrationResult = serde_json::from_str(&fs::read_to_string(out.join("calibration/last/result.json")).unwrap()).unwrap();
        result.candidates.iter().map(|c| c.valid).collect()
    };
    let loose = valid("0.5");
    let strict = valid("0.001");
    assert!(strict.iter().zip(&loose).all(|(s, l)| !s || *l));
    assert!(loose.iter().any(|v| *v));
}

#[test]
fn logistic_variant_reports_aucroc() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), PLANTED);
    let (c, out) = (config.to_str().unwrap(), tmp.path().join("o"));
    let o = out.to_str().unwrap();
    assert!(mera(&["cache", "--config", c, "--out", o]).status.success());
    let res = mera(&["train-probes", "--config", c, "--out", o, "--variant", "mera_logistic"]);
    assert!(res.status.success(), "{}", stderr(&res));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("probes/last/metrics.json")).unwrap()).unwrap();
    for layer in metrics["layers"].as_array().unwrap() {
        assert!(layer.get("val_aucroc").is_some());
        assert!(layer.get("val_rmse").is_none());
    }
    let policy = fs::read_to_string(out.join("probes/last/policy.json")).unwrap();
    assert!(policy.contains("mera_logistic"));
    assert!(policy.contains("\"alpha\": null"));
}

#[test]
fn regression_probes_fit_the_planted_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), PLANTED);
    let (c, out) = (config.to_str().unwrap(), tmp.path().join("o"));
    let o = out.to_str().unwrap();
    assert!(mera(&["cache", "--config", c, "--out", o]).status.success());
    assert!(mera(&["train-probes", "--config", c, "--out", o]).status.success());
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("probes/last/metrics.json")).unwrap()).unwrap();
    let best = metrics["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["val_rmse"].as_f64().unwrap())
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.25, "best val rmse {best}");
}

#[test]
fn output_dir_resolution() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY);
    let c = config.to_str().unwrap();
    let from_env = tmp.path().join("env");
    let res = mera_env(&["cache", "--config", c], Some(&from_env));
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(from_env.join("traces/last/train/manifest.json").is_file());

    let from_flag = tmp.path().join("flag");
    let res = mera_env(&["cache", "--config", c, "--out", from_flag.to_str().unwrap()], Some(&from_env));
    assert!(res.status.success());
    assert!(from_flag.join("traces/last/cal/manifest.json").is_file());

    let res = mera(&["cache", "--config", c]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("output directory"));
}

#[test]
fn validation_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("o");
    let o = o.to_str().unwrap();
    let bad_delta = write_config(tmp.path(), r#"{"calibration": {"delta": 1.5}}"#);
    for args in [
        vec!["cache", "--config", bad_delta.to_str().unwrap(), "--out", o],
        vec!["cache", "--config", "/nonexistent/config.json", "--out", o],
        vec!["cache", "--out", o, "--epsilon", "-1"],
        vec!["train-probes", "--out", o],
        vec!["simulate-guarantee", "--trials", "0"],
        vec!["cache", "--no-such-flag"],
    ] {
        let res = mera(&args);
        assert_eq!(res.status.code(), Some(1), "{args:?}: {}", stderr(&res));
        assert!(stdout(&res).is_empty());
        assert!(!stderr(&res).is_empty());
    }
}

#[test]
fn stale_traces_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), TINY);
    let (c, o) = (config.to_str().unwrap(), tmp.path().join("o"));
    let o = o.to_str().unwrap();
    assert!(mera(&["cache", "--config", c, "--out", o, "--seed", "1"]).status.success());
    let res = mera(&["train-probes", "--config", c, "--out", o, "--seed", "2"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("different data config"));
}

#[test]
fn io_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let config = write_config(tmp.path(), TINY);
    let res = mera(&["cache", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "{}", stderr(&res));
}

#[test]
fn simulate_guarantee_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let json = tmp.path().join("sim.json");
    let res = mera(&["simulate-guarantee", "--trials", "300", "--seed", "7", "--out", json.to_str().unwrap()]);
    assert!(res.status.success());
    let line = stdout(&res);
    assert!(line.starts_with("violations "), "{line}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert!(report["violation_rate"].as_f64().unwrap() <= report["acceptance_upper"].as_f64().unwrap());

    let strong = mera(&["simulate-guarantee", "--trials", "200", "--effect-size", "0.5"]);
    assert!(stdout(&strong).contains("selection_rate=1.0000"));
}

#[test]
fn exported_test_vectors_parse() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("vectors.json");
    let res = mera(&["export-test-vectors", "--out", path.to_str().unwrap(), "--count", "100", "--seed", "3"]);
    assert!(res.status.success());
    let vectors: SteeringTestVectors = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(vectors.cases.len(), 100);
    assert!(vectors.cases.iter().any(|c| c.triggered));
    assert!(vectors.cases.iter().any(|c| !c.triggered));
}
