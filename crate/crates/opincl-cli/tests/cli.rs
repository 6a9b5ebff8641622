use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use opincl_cli::{list_builtins, run, run_str, CliError, RunOptions};
use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.json"))
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions { out_dir: Some(dir.to_path_buf()), ..Default::default() }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_opincl"))
}

#[test]
fn bad_exponent_is_an_input_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let err = run(&config("bad-exponent"), &opts(dir.path())).unwrap_err();
    assert!(matches!(err, CliError::Input(_)));
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("problem.p"), "{err}");

    let out = bin().args(["run", config("bad-exponent").to_str().unwrap(), "--out-dir"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("problem.p"));
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"command":"dist2-check","problem":{"polytopes":1,"trials":10,"colour":"red"}}"#;
    let err = run_str(text, &opts(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("colour"), "{err}");
}

#[test]
fn solve_inclusion_report_has_solver_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&config("fredholm-constant"), &opts(dir.path())).unwrap();
    assert_eq!(out.exit_code, 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(&out.report_path).unwrap()).unwrap();
    let s = &report["summary"];
    for key in ["converged", "iterations", "final_defect", "bound_satisfied", "slack"] {
        assert!(!s[key].is_null(), "missing {key}");
    }
    assert_eq!(s["bound_satisfied"], Value::Bool(true));
    assert_eq!(report["config"]["numeric"]["tol"], 1e-12);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 12);
    for a in report["artifacts"].as_array().unwrap() {
        assert!(dir.path().join(a.as_str().unwrap()).exists());
    }
}

#[test]
fn grad_check_records_max_relative_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&config("grad-check-lq"), &opts(dir.path())).unwrap();
    assert_eq!(out.exit_code, 0);
    let e = out.report.summary["max_rel_err"].as_f64().unwrap();
    assert!(e <= 1e-6, "{e}");
}

#[test]
fn builtin_listing_is_stable() {
    let a = list_builtins();
    assert_eq!(a, list_builtins());
    for name in ["example3-half-square", "volterra-identity", "solve-inclusion", "grad-check"] {
        assert!(a.contains(name), "missing {name}");
    }
    let out = bin().arg("list-builtins").output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim_end(), a.trim_end());
}

#[test]
fn reports_are_never_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&config("perturb-fredholm"), &opts(dir.path())).unwrap();
    let b = run(&config("perturb-fredholm"), &opts(dir.path())).unwrap();
    assert_ne!(a.report_path, b.report_path);
    assert!(a.report_path.exists() && b.report_path.exists());
    assert!(b.report_path.to_string_lossy().ends_with(".1.json"));
}

#[test]
fn same_seed_gives_identical_csvs() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = run(&config("dist2-polytopes"), &opts(d1.path())).unwrap();
    let b = run(&config("dist2-polytopes"), &opts(d2.path())).unwrap();
    assert!(!a.report.artifacts.is_empty());
    assert_eq!(a.report.artifacts, b.report.artifacts);
    for f in &a.report.artifacts {
        assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_changes_hash() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&config("dist2-polytopes"), &opts(dir.path())).unwrap();
    let b = run(&config("dist2-polytopes"), &RunOptions { seed: Some(99), ..opts(dir.path()) }).unwrap();
    assert_eq!(b.report.seed, 99);
    assert_ne!(a.report.config_hash, b.report.config_hash);
}

#[test]
fn failing_check_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // the perturbed certificate is expected to be rejected; claiming it passes must fail
    let text = fs::read_to_string(config("certify-perturbed")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["checks"]["expect_pass"] = Value::Bool(true);
    let out = run_str(&v.to_string(), &opts(dir.path())).unwrap();
    assert_eq!(out.exit_code, 2);
    assert!(!out.report.passed);
    assert_eq!(out.failed_checks()[0].id, "certificate-verdict");
}

#[test]
fn precondition_failure_is_recorded_in_report() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
        "command": "solve-inclusion",
        "problem": {
            "grid": {"type": "interval", "nodes": 21},
            "operator": {"kernel": {"type": "fredholm-constant", "c": 1.5}},
            "multimap": {"type": "affine", "slope": 1.0, "offset": [1.0]},
            "p": 2
        }
    }"#;
    let out = run_str(text, &opts(dir.path())).unwrap();
    assert_eq!(out.exit_code, 2);
    let err = out.report.error.as_ref().expect("error recorded");
    assert!(!err.check.is_empty());
    assert!(out.report_path.exists());
}

#[test]
fn strict_mode_fails_on_warnings() {
    let dir = tempfile::tempdir().unwrap();
    // slope 1 map declared with growth rate 0.5: the sampled growth check warns
    let text = fs::read_to_string(config("gronwall")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["problem"]["growth"]["beta"] = Value::from(0.5);
    v["checks"].as_object_mut().unwrap().remove("expected_growth_bound");
    let text = v.to_string();
    let relaxed = run_str(&text, &opts(dir.path())).unwrap();
    assert!(!relaxed.report.warnings.is_empty());
    assert_eq!(relaxed.exit_code, 0);
    let strict = run_str(&text, &RunOptions { strict: true, ..opts(dir.path()) }).unwrap();
    assert_eq!(strict.exit_code, 2);
    assert!(!strict.report.passed);
}
