//! Ensemble execution: per-seed calibration and navigation pipelines, the
//! JSON report and the CSV logs.
//!
//! CSV files (all lengths in mm, times in s, floats with 9 significant digits):
//!
//! * `runs.csv`: `seed,mode,status,final_error,moves,calibration_time,navigation_time,v,m,u_b,u_a_dof1,u_a_dof2,u_a_dof3,u_a_dof5,message`
//! * `trajectory_seed<S>_<mode>.csv`: `t,true_x,true_y,true_z,est_x,est_y,est_z,tip_x,tip_y,tip_z,error,trace_p,min_eigenvalue,innovation,gated`
//! * `belief_seed<S>[_<mode>].csv`: `step,t,center_x,center_y,center_z,radius,weight,residual`
//! * `sensors_seed<S>_<mode>_<phase>.csv`: `t,sensor_id,raw,enabled` (`raw` empty when not ready)

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::arm::DofMode;
use crate::calibration::{run_protocol, CalibrationReport, UncertaintyBudget};
use crate::ekf::{EkfState, Prior};
use crate::nav::{navigate, NavResult, NavStep};
use crate::scenario::{ExperimentMode, ScenarioConfig};
use crate::world::{streams, SensorLogRow, World};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] crate::scenario::ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("could not build thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `%.9g`-style formatting.
pub fn fmt_g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_g9).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Calibrate,
    NavigateCold,
    NavigateCalibrated,
}

impl RunMode {
    pub fn label(self) -> &'static str {
        match self {
            RunMode::Calibrate => "calibrate",
            RunMode::NavigateCold => "navigate_cold",
            RunMode::NavigateCalibrated => "navigate_calibrated",
        }
    }
}

impl ExperimentMode {
    pub fn run_modes(self) -> &'static [RunMode] {
        match self {
            ExperimentMode::Calibrate => &[RunMode::Calibrate],
            ExperimentMode::NavigateCold => &[RunMode::NavigateCold],
            ExperimentMode::NavigateCalibrated => &[RunMode::NavigateCalibrated],
            ExperimentMode::Compare => &[RunMode::NavigateCold, RunMode::NavigateCalibrated],
        }
    }
}

/// One seed's outcome in one mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRow {
    pub seed: u64,
    pub mode: RunMode,
    pub ok: bool,
    pub message: Option<String>,
    /// mm; absent for calibration-only runs.
    pub final_error: Option<f64>,
    /// Belief-map moves for calibration, probe moves for navigation.
    pub moves: Option<usize>,
    pub budget: Option<UncertaintyBudget>,
    /// Simulated seconds.
    pub calibration_time: Option<f64>,
    pub navigation_time: Option<f64>,
    pub wall_time_ms: f64,
}

/// Logs kept in memory for the CSV writers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedLogs {
    pub calibration: Option<CalibrationReport>,
    pub navigation: Option<NavResult>,
    pub sensors: Vec<(String, Vec<SensorLogRow>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeAggregate {
    pub runs: usize,
    pub failures: usize,
    pub median_error: Option<f64>,
    pub iqr_error: Option<f64>,
    pub p90_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    /// Fully resolved configuration, keys sorted.
    pub config: serde_json::Value,
    pub rows: Vec<SeedRow>,
    pub aggregate: BTreeMap<RunMode, ModeAggregate>,
    #[serde(skip)]
    pub logs: Vec<(u64, RunMode, SeedLogs)>,
}

impl RunReport {
    pub fn rows_for(&self, mode: RunMode) -> impl Iterator<Item = &SeedRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| !r.ok)
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

fn aggregate(rows: &[SeedRow], mode: RunMode) -> ModeAggregate {
    let mine: Vec<_> = rows.iter().filter(|r| r.mode == mode).collect();
    let mut errors: Vec<f64> = mine.iter().filter_map(|r| r.final_error).collect();
    errors.sort_by(f64::total_cmp);
    ModeAggregate {
        runs: mine.len(),
        failures: mine.iter().filter(|r| !r.ok).count(),
        median_error: percentile(&errors, 0.5),
        iqr_error: percentile(&errors, 0.75).zip(percentile(&errors, 0.25)).map(|(a, b)| a - b),
        p90_error: percentile(&errors, 0.9),
    }
}

/// Derived seed for the navigation bench so it never replays the
/// calibration bench's random streams.
pub fn navigation_seed(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Initial source guess: the true source plus seeded Gaussian error.
pub fn prior_for(cfg: &ScenarioConfig, seed: u64) -> Prior {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(streams::PRIOR);
    let normal = Normal::new(0.0, cfg.navigation.prior_std).expect("validated prior_std");
    let source = cfg.plume.source_position;
    let guess = Point3::new(
        source.x + normal.sample(&mut rng),
        source.y + normal.sample(&mut rng),
        source.z + normal.sample(&mut rng),
    );
    Prior::isotropic(guess, cfg.navigation.prior_std, cfg.navigation.prior_bias_std)
}

fn calibrate(cfg: &ScenarioConfig, seed: u64) -> (World, Result<CalibrationReport, String>) {
    let mut world = cfg.build_world(seed);
    let result = run_protocol(&mut world, &cfg.calibration).map_err(|e| e.to_string());
    (world, result)
}

/// Navigation in a fresh bench shared by the cold and calibrated runs.
fn run_navigation(cfg: &ScenarioConfig, seed: u64, budget: Option<&UncertaintyBudget>) -> Result<(World, NavResult), String> {
    let mut world = cfg.build_world(navigation_seed(seed));
    world.set_mode(DofMode::Dof5);
    if !world.warm_up(cfg.calibration.max_warmup) {
        return Err("sensors never became ready".into());
    }
    let nav = &cfg.navigation;
    let spec = cfg.sensor.spec();
    let prior = prior_for(cfg, seed);
    let t = world.time();
    let filter = match budget {
        Some(b) => EkfState::init_from_budget(b, nav.mode, &spec, &prior, &nav.tuning, t).map_err(|e| e.to_string())?,
        None => EkfState::cold_start(&spec, &prior, nav.cold_q_position, &nav.tuning, t),
    };
    let model = nav.range_model.build(&cfg.plume, t);
    let result = navigate(&mut world, filter, &model, &nav.config);
    Ok((world, result))
}

fn run_seed(cfg: &ScenarioConfig, seed: u64, mode: RunMode) -> (SeedRow, SeedLogs) {
    let started = Instant::now();
    let mut row = SeedRow {
        seed,
        mode,
        ok: true,
        message: None,
        final_error: None,
        moves: None,
        budget: None,
        calibration_time: None,
        navigation_time: None,
        wall_time_ms: 0.0,
    };
    let mut logs = SeedLogs::default();
    let mut budget = None;
    if matches!(mode, RunMode::Calibrate | RunMode::NavigateCalibrated) {
        let (mut world, result) = calibrate(cfg, seed);
        logs.sensors.push(("calibration".into(), std::mem::take(&mut world.sensor_log)));
        match result {
            Ok(report) => {
                row.calibration_time = Some(report.calibration_time);
                row.budget = Some(report.budget.clone());
                if mode == RunMode::Calibrate {
                    row.moves = Some(report.localization.type_b.m);
                }
                budget = Some(report.budget.clone());
                logs.calibration = Some(report);
            }
            Err(e) => {
                row.ok = false;
                row.message = Some(format!("calibration: {e}"));
            }
        }
    }
    let wants_nav = matches!(mode, RunMode::NavigateCold | RunMode::NavigateCalibrated);
    if wants_nav && row.ok {
        match run_navigation(cfg, seed, budget.as_ref()) {
            Ok((mut world, result)) => {
                logs.sensors.push(("navigation".into(), std::mem::take(&mut world.sensor_log)));
                row.final_error = Some(result.final_error);
                row.moves = Some(result.steps.len());
                row.navigation_time = result.steps.last().map(|s| s.t);
                logs.navigation = Some(result);
            }
            Err(e) => {
                row.ok = false;
                row.message = Some(format!("navigation: {e}"));
            }
        }
    }
    row.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    (row, logs)
}

/// Runs every (seed, mode) pair, in parallel on up to `jobs` threads
/// (0 = all cores), and assembles the report in seed order.
pub fn run(cfg: &ScenarioConfig, jobs: usize) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let tasks: Vec<(u64, RunMode)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.mode.run_modes().iter().map(move |&m| (s, m)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let results: Vec<(SeedRow, SeedLogs)> = pool.install(|| tasks.par_iter().map(|&(s, m)| run_seed(cfg, s, m)).collect());
    let mut rows = Vec::with_capacity(results.len());
    let mut logs = Vec::with_capacity(results.len());
    for (row, log) in results {
        if let Some(msg) = &row.message {
            log::warn!("seed {} {}: {msg}", row.seed, row.mode.label());
        }
        logs.push((row.seed, row.mode, log));
        rows.push(row);
    }
    let aggregate = cfg.mode.run_modes().iter().map(|&m| (m, aggregate(&rows, m))).collect();
    Ok(RunReport {
        config: serde_json::to_value(cfg).expect("config serializes"),
        rows,
        aggregate,
        logs,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub const RUNS_HEADER: &str =
    "seed,mode,status,final_error,moves,calibration_time,navigation_time,v,m,u_b,u_a_dof1,u_a_dof2,u_a_dof3,u_a_dof5,message";
pub const TRAJECTORY_HEADER: &str =
    "t,true_x,true_y,true_z,est_x,est_y,est_z,tip_x,tip_y,tip_z,error,trace_p,min_eigenvalue,innovation,gated";
pub const BELIEF_HEADER: &str = "step,t,center_x,center_y,center_z,radius,weight,residual";
pub const SENSOR_HEADER: &str = "t,sensor_id,raw,enabled";

fn csv_text(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn runs_csv(report: &RunReport) -> String {
    let mut out = format!("{RUNS_HEADER}\n");
    for r in &report.rows {
        let ua = |m: DofMode| opt(r.budget.as_ref().and_then(|b| b.u_a(m)));
        let tb = r.budget.as_ref().and_then(|b| b.type_b);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.mode.label(),
            if r.ok { "ok" } else { "error" },
            opt(r.final_error),
            r.moves.map(|m| m.to_string()).unwrap_or_default(),
            opt(r.calibration_time),
            opt(r.navigation_time),
            opt(tb.map(|b| b.v)),
            tb.map(|b| b.m.to_string()).unwrap_or_default(),
            opt(tb.map(|b| b.u_b)),
            ua(DofMode::Dof1),
            ua(DofMode::Dof2),
            ua(DofMode::Dof3),
            ua(DofMode::Dof5),
            csv_text(r.message.as_deref().unwrap_or("")),
        );
    }
    out
}

pub fn trajectory_csv(steps: &[NavStep]) -> String {
    let mut out = format!("{TRAJECTORY_HEADER}\n");
    for s in steps {
        let f = |v: f64| fmt_g9(v);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f(s.t),
            f(s.true_source.x),
            f(s.true_source.y),
            f(s.true_source.z),
            f(s.estimate.x),
            f(s.estimate.y),
            f(s.estimate.z),
            f(s.tip.x),
            f(s.tip.y),
            f(s.tip.z),
            f(s.error),
            f(s.trace_p),
            f(s.min_eigenvalue),
            f(s.innovation),
            u8::from(s.gated),
        );
    }
    out
}

pub fn belief_csv(report: &CalibrationReport) -> String {
    let mut out = format!("{BELIEF_HEADER}\n");
    for (i, p) in report.localization.probes.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{}",
            fmt_g9(p.t),
            fmt_g9(p.center.x),
            fmt_g9(p.center.y),
            fmt_g9(p.center.z),
            fmt_g9(p.radius),
            fmt_g9(p.weight),
            fmt_g9(p.residual),
        );
    }
    out
}

pub fn sensor_csv(rows: &[SensorLogRow]) -> String {
    let mut out = format!("{SENSOR_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", fmt_g9(r.t), r.sensor_id, opt(r.raw), u8::from(r.enabled));
    }
    out
}

pub fn trajectory_file_name(seed: u64, mode: RunMode) -> String {
    format!("trajectory_seed{seed}_{}.csv", mode.label())
}

/// Writes one trajectory CSV per navigation run (suffixed by mode) and
/// returns the paths written.
pub fn emit_plot_data(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for (seed, mode, logs) in &report.logs {
        if *mode == RunMode::Calibrate {
            continue;
        }
        let steps = logs.navigation.as_ref().map(|n| n.steps.as_slice()).unwrap_or(&[]);
        let path = dir.join(trajectory_file_name(*seed, *mode));
        write_file(&path, &trajectory_csv(steps))?;
        written.push(path);
    }
    if written.is_empty() {
        let path = dir.join("trajectory.csv");
        write_file(&path, &trajectory_csv(&[]))?;
        written.push(path);
    }
    Ok(written)
}

/// Writes the report, calibration reports and every CSV under `dir`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_file(&dir.join("report.json"), &json)?;
    write_file(&dir.join("runs.csv"), &runs_csv(report))?;
    for (seed, mode, logs) in &report.logs {
        if let Some(cal) = &logs.calibration {
            let suffix = if *mode == RunMode::Calibrate { String::new() } else { format!("_{}", mode.label()) };
            let cal_json = serde_json::to_string_pretty(cal).expect("calibration report serializes");
            write_file(&dir.join(format!("calibration_seed{seed}{suffix}.json")), &cal_json)?;
            write_file(&dir.join(format!("belief_seed{seed}{suffix}.csv")), &belief_csv(cal))?;
        }
        for (phase, rows) in &logs.sensors {
            if !rows.is_empty() {
                let name = format!("sensors_seed{seed}_{}_{phase}.csv", mode.label());
                write_file(&dir.join(name), &sensor_csv(rows))?;
            }
        }
    }
    emit_plot_data(report, dir)?;
    Ok(())
}
