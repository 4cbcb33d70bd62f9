use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use oio_core::runner::{self, RunReport, TRAJECTORY_HEADER};
use oio_core::scenario::{ExperimentMode, ScenarioConfig};
use tempfile::TempDir;

fn oio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oio"))
        .args(args)
        .env("OIO_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn run_into(dir: &Path, args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend(["--out", dir.to_str().unwrap()]);
    oio(&all)
}

fn csv_files(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect()
}

fn write_config(dir: &TempDir, text: &str) -> String {
    let path = dir.path().join("scenario.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn repeated_runs_write_identical_csv() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dir in [&a, &b] {
        let out = run_into(dir.path(), &["compare", "--seeds", "2", "--jobs", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let files = csv_files(a.path());
    assert_eq!(files, csv_files(b.path()));
    assert!(!files.is_empty());
    for name in &files {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn seed_results_do_not_depend_on_the_ensemble() {
    let (alone, together) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert!(run_into(alone.path(), &["navigate", "--seeds", "5"]).status.success());
    assert!(run_into(together.path(), &["navigate", "--seeds", "3,5", "--jobs", "1"]).status.success());
    let name = runner::trajectory_file_name(5, runner::RunMode::NavigateCalibrated);
    assert_eq!(fs::read(alone.path().join(&name)).unwrap(), fs::read(together.path().join(&name)).unwrap());
    let row = |dir: &Path| {
        fs::read_to_string(dir.join("runs.csv"))
            .unwrap()
            .lines()
            .find(|l| l.starts_with("5,"))
            .unwrap()
            .to_string()
    };
    assert_eq!(row(alone.path()), row(together.path()));
}

#[test]
fn compare_writes_every_artefact() {
    let dir = TempDir::new().unwrap();
    let out = run_into(dir.path(), &["compare", "--seeds", "1"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("navigate_cold") && stdout.contains("navigate_calibrated"));
    let files = csv_files(dir.path());
    for expected in [
        "runs.csv",
        "trajectory_seed1_navigate_cold.csv",
        "trajectory_seed1_navigate_calibrated.csv",
        "belief_seed1_navigate_calibrated.csv",
    ] {
        assert!(files.contains(expected), "missing {expected} in {files:?}");
    }
    assert!(files.iter().any(|f| f.starts_with("sensors_seed1_")));
    assert!(dir.path().join("report.json").exists());
    assert!(dir.path().join("calibration_seed1_navigate_calibrated.json").exists());
    let runs = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().next().unwrap(), runner::RUNS_HEADER);
    assert_eq!(runs.lines().count(), 3);
}

#[test]
fn report_echoes_the_resolved_config() {
    let cfg_dir = TempDir::new().unwrap();
    let path = write_config(&cfg_dir, "[plume]\namplitude = 800.0\n\n[navigation]\nsteps = 4\n");
    let out_dir = TempDir::new().unwrap();
    let out = run_into(out_dir.path(), &["navigate", "--cold", "--config", &path, "--seeds", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(out_dir.path().join("report.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let config = &json["config"];
    assert_eq!(config["plume"]["amplitude"], 800.0);
    assert_eq!(config["plume"]["sigma0"], 300.0);
    assert_eq!(config["navigation"]["steps"], 4);
    assert_eq!(config["mode"], "navigate_cold");
    let keys: Vec<&String> = config.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    let rows = fs::read_to_string(out_dir.path().join("trajectory_seed1_navigate_cold.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);
}

#[test]
fn bad_config_exits_with_status_two() {
    let dir = TempDir::new().unwrap();
    let path = write_config(&dir, "[plume]\nsigma0 = -5.0\n");
    let out = oio(&["calibrate", "--config", &path]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("plume"));
    let out = oio(&["calibrate", "--seeds", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let path = write_config(&dir, "unknown_key = 1\n");
    assert_eq!(oio(&["calibrate", "--config", &path]).status.code(), Some(2));
}

#[test]
fn strict_mode_fails_on_seed_errors() {
    let dir = TempDir::new().unwrap();
    let path = write_config(&dir, "[calibration.localize]\nmax_moves = 3\n");
    let out_dir = TempDir::new().unwrap();
    let lenient = run_into(out_dir.path(), &["calibrate", "--config", &path, "--seeds", "1"]);
    assert!(lenient.status.success());
    let runs = fs::read_to_string(out_dir.path().join("runs.csv")).unwrap();
    assert!(runs.lines().nth(1).unwrap().contains(",error,"));
    let strict = run_into(out_dir.path(), &["calibrate", "--config", &path, "--seeds", "1", "--strict"]);
    assert_eq!(strict.status.code(), Some(3));
}

#[test]
fn empty_report_yields_a_header_only_trajectory() {
    let mut cfg = ScenarioConfig::default();
    cfg.mode = ExperimentMode::Calibrate;
    let report = RunReport {
        config: serde_json::to_value(&cfg).unwrap(),
        rows: Vec::new(),
        aggregate: Default::default(),
        logs: Vec::new(),
    };
    let dir = TempDir::new().unwrap();
    let written = runner::emit_plot_data(&report, dir.path()).unwrap();
    assert_eq!(written.len(), 1);
    assert_eq!(fs::read_to_string(&written[0]).unwrap(), format!("{TRAJECTORY_HEADER}\n"));
}
