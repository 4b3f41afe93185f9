use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn fracdrift(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fracdrift"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SIM: &[&str] = &[
    "simulate", "--model", "fou", "--theta0", "-1", "--h", "0.7", "--n", "1024", "--alpha", "0.5", "--kappa", "1", "--seed", "7",
];

fn simulate_to(dir: &Path, name: &str) -> Output {
    let mut args = SIM.to_vec();
    args.extend(["--out", name]);
    fracdrift(&args, dir)
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempdir().unwrap();
    let a = simulate_to(dir.path(), "a.csv");
    let b = simulate_to(dir.path(), "b.csv");
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&b), 0);
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    let stdout = String::from_utf8_lossy(&a.stdout);
    assert!(stdout.contains("n = 1024") && stdout.contains("T_n = 32") && stdout.contains("alpha_n = 0.03125"));
    assert!(dir.path().join("a.json").exists());
}

#[test]
fn missing_theta0_names_the_key() {
    let dir = tempdir().unwrap();
    let out = fracdrift(&["simulate", "--model", "fou", "--h", "0.7", "--n", "64"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("theta0"));
}

#[test]
fn hurst_out_of_range_is_a_validation_error() {
    let dir = tempdir().unwrap();
    let out = fracdrift(&["simulate", "--model", "fou", "--theta0", "-1", "--h", "1.2", "--n", "64"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("noise.h"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "model.name = fou\nnoise.hurst = 0.7\n").unwrap();
    let out = fracdrift(&["simulate", "--config", "bad.conf"], dir.path());
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("noise.hurst") && err.contains("line 2"), "{err}");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("c.conf"), "model.name = fou\nmodel.theta0 = -1\nnoise.h = 1.5\nscheme.n = 64\n").unwrap();
    let out = fracdrift(&["simulate", "--config", "c.conf", "--h", "0.7"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn estimate_recovers_a_finite_parameter_in_the_box() {
    let dir = tempdir().unwrap();
    assert_eq!(code(&simulate_to(dir.path(), "p.csv")), 0);
    let out = fracdrift(&["estimate", "--model", "fou", "--h", "0.7", "--data", "p.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let theta = v["zero_squares"]["theta_hat"][0].as_f64().unwrap();
    assert!(theta.is_finite() && (-5.0..=5.0).contains(&theta), "{theta}");
    assert_eq!(v["plug_in"], false);
}

#[test]
fn closed_form_agrees_with_zero_squares() {
    let dir = tempdir().unwrap();
    assert_eq!(code(&simulate_to(dir.path(), "p.csv")), 0);
    let out = fracdrift(&["estimate", "--model", "fou", "--h", "0.7", "--data", "p.csv", "--closed-form"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let zs = v["zero_squares"]["theta_hat"][0].as_f64().unwrap();
    let cf = v["closed_form"]["theta_hat"].as_f64().unwrap();
    assert!((zs - cf).abs() <= 1e-6, "{zs} vs {cf}");
}

#[test]
fn plug_in_mode_reports_the_noise_estimate() {
    let dir = tempdir().unwrap();
    assert_eq!(code(&simulate_to(dir.path(), "p.csv")), 0);
    let out = fracdrift(&["estimate", "--model", "fou", "--data", "p.csv", "--estimate-h"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["plug_in"], true);
    assert!(v["h_sigma"]["h_hat"].as_f64().unwrap() > 0.5);
}

#[test]
fn corrupt_csv_reports_the_line() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "t,y1\n0,1.0\n0.5,oops\n1.0,2.0\n").unwrap();
    let out = fracdrift(&["estimate", "--model", "fou", "--h", "0.7", "--data", "bad.csv"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn missing_data_file_is_an_io_error() {
    let dir = tempdir().unwrap();
    let out = fracdrift(&["estimate", "--model", "fou", "--h", "0.7", "--data", "nope.csv"], dir.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn empty_experiment_list_is_rejected() {
    let dir = tempdir().unwrap();
    std::fs::write(
        dir.path().join("e.conf"),
        "model.name = fou\nmodel.theta0 = -1\nnoise.h = 0.7\nscheme.n = 64\nexperiment.list =\n",
    )
    .unwrap();
    let out = fracdrift(&["experiment", "--config", "e.conf", "--out", "camp"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("experiment.list"));
}

const SMALL: &str = "model.name = fou
model.theta0 = -1
noise.h = 0.7
scheme.n = 64, 256
experiment.list = consistency
experiment.replications = 4
experiment.tolerance = 10
experiment.min_fraction_within = 0.5
";

#[test]
fn experiment_prints_verdicts_and_resumes() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("s.conf"), SMALL).unwrap();
    let first = fracdrift(&["experiment", "--config", "s.conf", "--out", "camp"], dir.path());
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(String::from_utf8_lossy(&first.stdout).starts_with("PASS consistency"));
    let summary = std::fs::read(dir.path().join("camp/summary.csv")).unwrap();
    let records = std::fs::read(dir.path().join("camp/records.jsonl")).unwrap();

    let second = fracdrift(&["experiment", "--config", "s.conf", "--out", "camp"], dir.path());
    assert_eq!(code(&second), 0);
    assert_eq!(std::fs::read(dir.path().join("camp/summary.csv")).unwrap(), summary);
    assert_eq!(std::fs::read(dir.path().join("camp/records.jsonl")).unwrap(), records);

    let other = fracdrift(&["experiment", "--config", "s.conf", "--out", "camp", "--seed", "3"], dir.path());
    assert_eq!(code(&other), 2, "a different config must not reuse the directory");
}

#[test]
fn failing_threshold_exits_with_5() {
    let dir = tempdir().unwrap();
    std::fs::write(dir.path().join("s.conf"), SMALL.replace("experiment.tolerance = 10", "experiment.tolerance = 0")).unwrap();
    let out = fracdrift(&["experiment", "--config", "s.conf", "--out", "camp"], dir.path());
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("FAIL consistency"));
}

#[test]
fn help_lists_every_key() {
    let dir = tempdir().unwrap();
    let out = fracdrift(&["experiment", "--help"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["model.theta0", "noise.h", "scheme.kappa", "scheme.burn_in", "experiment.seed", "experiment.qv_n"] {
        assert!(text.contains(key), "{key}");
    }
    assert!(text.contains("[time]"));
}
