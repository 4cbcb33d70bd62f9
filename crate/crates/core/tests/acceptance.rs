//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p oio-core --test acceptance -- --nocapture`.

mod common;

use std::time::Instant;

use common::{cost, lattice_minimum, linear_oracle, random_instance};
use nalgebra::Vector3;
use oio_core::arm::DofMode;
use oio_core::belief::{extract_vertex, localize, LocalizeOptions, RangeModel, SolverOptions};
use oio_core::bout::{window_for_dof, BaselineRule, BoutState};
use oio_core::calibration::{type_a, type_b, CalibrationReport};
use oio_core::ekf::{EkfState, NoiseTuning, Prior};
use oio_core::plume::PlumeParams;
use oio_core::runner::{self, RunMode, RunReport};
use oio_core::scenario::{ExperimentMode, ScenarioConfig};
use oio_core::sensor::{catalog, SensorKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria known not to hold with the current models; see the project notes.
const EXPECTED_FAILURES: &[u32] = &[6];

const ENSEMBLE: u64 = 50;
const MEDIAN_LIMIT_MM: f64 = 10.0;
const P90_LIMIT_MM: f64 = 30.0;
const SIGN_TEST_ALPHA: f64 = 0.01;
const MIN_IMPROVEMENT: f64 = 0.25;
const PSD_TOL: f64 = 1e-9;
const JACOBIAN_TOL: f64 = 1e-5;
const FORMULA_TOL: f64 = 1e-12;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, pass: bool, detail: String) -> Outcome {
    Outcome { id, pass, detail }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn budget_recomputes(cal: &CalibrationReport) -> f64 {
    let mut worst: f64 = 0.0;
    for stage in &cal.stages {
        let n = stage.window.len() as f64;
        let mean = stage.window.iter().sum::<f64>() / n;
        let s = (stage.window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        worst = worst.max(relative_gap(type_a(s, stage.window.len()), cal.budget.type_a[&stage.mode].u_a));
    }
    let loc = &cal.localization;
    let b = cal.budget.type_b.expect("complete budget");
    worst.max(relative_gap(type_b((loc.vertex - loc.truth).norm(), loc.measurements - 1), b.u_b))
}

fn formula_exactness(ensemble: &RunReport) -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_delta: f64 = 0.0;
    for _ in 0..1000 {
        let baseline: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..50.0)).collect();
        let k = rng.random_range(2..12);
        let mut state = BoutState::capture_baseline(&baseline, k, BaselineRule::Max).unwrap();
        let y = rng.random_range(0.0..500.0);
        let before = state.prev_smoothed();
        let d = state.update(y).unwrap();
        worst_delta = worst_delta.max((d.delta - (d.smoothed - before)).abs());
        for _ in 0..rng.random_range(0..20) {
            let before = state.prev_smoothed();
            let d = state.update(rng.random_range(0.0..500.0)).unwrap();
            worst_delta = worst_delta.max((d.delta - (d.smoothed - before)).abs());
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let worst_budget = ensemble
        .logs
        .iter()
        .filter_map(|(_, _, l)| l.calibration.as_ref())
        .map(budget_recomputes)
        .fold(0.0, f64::max);
    let pass = worst_delta == 0.0 && worst_budget <= FORMULA_TOL && elapsed < 1.0;
    outcome(
        1,
        pass,
        format!("max |δ − Δy'| = {worst_delta:e}, max budget rel. gap = {worst_budget:e}, {elapsed:.3} s"),
    )
}

fn catalog_fidelity() -> Outcome {
    let rows = [
        (SensorKind::Ndir, 0.1, 1.0, 30.0),
        (SensorKind::Pa, 0.2, 1.0, 50.0),
        (SensorKind::Ec, 0.5, 6.0, 20.0),
        (SensorKind::MoxMq, 0.5, 3.0, 100.0),
        (SensorKind::MoxMics, 0.1, 3.0, 100.0),
    ];
    let mismatches: Vec<String> = rows
        .iter()
        .filter(|(kind, lo, hi, err)| {
            let s = catalog(*kind);
            (s.tau_lower, s.tau_upper, s.noise_std) != (*lo, *hi, *err)
        })
        .map(|(kind, ..)| kind.to_string())
        .collect();
    outcome(2, mismatches.is_empty(), format!("5 rows checked, mismatches: {mismatches:?}"))
}

fn trilateration_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let opts = SolverOptions::default();
    let mut worst_exact: f64 = 0.0;
    for _ in 0..200 {
        let (_, spheres) = random_instance(&mut rng, 0.0);
        let fit = extract_vertex(&spheres, &opts).unwrap();
        worst_exact = worst_exact.max((fit.position - linear_oracle(&spheres)).norm());
    }
    let mut worst_lattice: f64 = 0.0;
    let mut costlier = 0;
    for _ in 0..200 {
        let (_, spheres) = random_instance(&mut rng, 0.01);
        let fit = extract_vertex(&spheres, &opts).unwrap();
        let lattice = lattice_minimum(&spheres, linear_oracle(&spheres));
        worst_lattice = worst_lattice.max((fit.position - lattice).amax());
        if cost(&spheres, &fit.position) > cost(&spheres, &lattice) + 1e-9 {
            costlier += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst_exact <= 1e-6 && worst_lattice <= 1.0 && costlier == 0 && elapsed < 30.0;
    outcome(
        3,
        pass,
        format!(
            "noiseless max gap {worst_exact:.2e} mm, 1% noise max lattice gap {worst_lattice:.3} mm, {costlier} fits costlier than the lattice, {elapsed:.2} s"
        ),
    )
}

fn ideal_move_count() -> Outcome {
    let mut cfg = ScenarioConfig::default();
    cfg.plume.decay_lambda = 0.0;
    cfg.sensor.kind = SensorKind::Ndir;
    cfg.sensor.noiseless = true;
    cfg.arm.config.encoder_drift_rate = 0.0;
    cfg.log_sensors = false;
    let mut world = cfg.build_world(1);
    world.warm_up(60.0);
    match localize(&mut world, &RangeModel::plume_inverse(cfg.plume), &LocalizeOptions::default()) {
        Ok(r) => {
            let miss = (r.vertex.unwrap() - cfg.plume.source_position).norm();
            outcome(
                4,
                r.m == 4 && r.measurements() == 5,
                format!("{} moves, {} measurements, vertex miss {miss:.2e} mm", r.m, r.measurements()),
            )
        }
        Err(e) => outcome(4, false, format!("localization failed: {e}")),
    }
}

fn dof_windows() -> Outcome {
    let got = [DofMode::Dof1, DofMode::Dof2, DofMode::Dof3, DofMode::Dof5].map(window_for_dof);
    outcome(5, got == [3, 5, 7, 11], format!("windows {got:?}"))
}

fn errors(report: &RunReport, mode: RunMode) -> Vec<f64> {
    report
        .rows_for(mode)
        .map(|r| r.final_error.filter(|_| r.ok).unwrap_or(f64::INFINITY))
        .collect()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn centimetre_accuracy(report: &RunReport, elapsed: f64) -> Outcome {
    let cal = sorted(errors(report, RunMode::NavigateCalibrated));
    let median = runner::percentile(&cal, 0.5).unwrap();
    let p90 = runner::percentile(&cal, 0.9).unwrap();
    let pass = median <= MEDIAN_LIMIT_MM && p90 <= P90_LIMIT_MM && elapsed < 300.0;
    outcome(
        6,
        pass,
        format!(
            "{} seeds: median {median:.2} mm (≤ {MEDIAN_LIMIT_MM}), p90 {p90:.2} mm (≤ {P90_LIMIT_MM}), {elapsed:.1} s",
            cal.len()
        ),
    )
}

/// P(X ≥ wins) for X ~ Binomial(n, ½).
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c *= (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += c;
        }
    }
    p / 2f64.powi(n as i32)
}

fn calibration_benefit(report: &RunReport) -> Outcome {
    let cold = errors(report, RunMode::NavigateCold);
    let cal = errors(report, RunMode::NavigateCalibrated);
    let (mut wins, mut losses) = (0, 0);
    for (c, k) in cold.iter().zip(&cal) {
        if k < c {
            wins += 1;
        } else if k > c {
            losses += 1;
        }
    }
    let p = sign_test_p(wins, wins + losses);
    let cold_median = runner::percentile(&sorted(cold), 0.5).unwrap();
    let cal_median = runner::percentile(&sorted(cal), 0.5).unwrap();
    let improvement = 1.0 - cal_median / cold_median;
    let pass = cal_median < cold_median && p < SIGN_TEST_ALPHA && improvement >= MIN_IMPROVEMENT;
    outcome(
        7,
        pass,
        format!(
            "median cold {cold_median:.2} mm vs calibrated {cal_median:.2} mm, {wins} wins / {losses} losses, sign-test p = {p:.2e}, improvement {:.1}%",
            improvement * 100.0
        ),
    )
}

fn numerical_hygiene(report: &RunReport) -> Outcome {
    let mut steps = 0;
    let mut violations = 0;
    for (_, _, logs) in &report.logs {
        for s in logs.navigation.iter().flat_map(|n| &n.steps) {
            steps += 1;
            if s.min_eigenvalue < -PSD_TOL * s.trace_p.abs() {
                violations += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let params = PlumeParams::default();
    let spec = catalog(SensorKind::Ec);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let centre = params.source_position + Vector3::new(rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0), rng.random_range(-150.0..150.0));
        let mut f = EkfState::cold_start(&spec, &Prior::isotropic(centre, 50.0, 5.0), 1.0, &NoiseTuning::default(), 0.0);
        f.x[3] = rng.random_range(-10.0..10.0);
        f.t = rng.random_range(0.0..200.0);
        let tip = centre + Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 400.0;
        let (_, h) = f.concentration_model(&tip, &params);
        for i in 0..4 {
            let (mut up, mut down) = (f, f);
            up.x[i] += 1e-3;
            down.x[i] -= 1e-3;
            let fd = (up.concentration_model(&tip, &params).0 - down.concentration_model(&tip, &params).0) / 2e-3;
            worst = worst.max((fd - h[i]).abs() / h.norm());
        }
    }
    let pass = steps > 0 && violations == 0 && worst <= JACOBIAN_TOL;
    outcome(
        8,
        pass,
        format!("{violations} PSD violations over {steps} steps, worst Jacobian rel. error {worst:.2e}"),
    )
}

fn csv_bundle(report: &RunReport) -> Vec<String> {
    let mut out = vec![runner::runs_csv(report)];
    for (_, _, logs) in &report.logs {
        if let Some(cal) = &logs.calibration {
            out.push(runner::belief_csv(cal));
        }
        if let Some(nav) = &logs.navigation {
            out.push(runner::trajectory_csv(&nav.steps));
        }
        for (_, rows) in &logs.sensors {
            out.push(runner::sensor_csv(rows));
        }
    }
    out
}

fn determinism() -> Outcome {
    let mut cfg = ScenarioConfig::default();
    cfg.mode = ExperimentMode::Compare;
    cfg.seeds = vec![4, 9, 17];
    let serial = runner::run(&cfg, 1).unwrap();
    let parallel = runner::run(&cfg, 0).unwrap();
    let (a, b) = (csv_bundle(&serial), csv_bundle(&parallel));
    let bytes: usize = a.iter().map(String::len).sum();
    outcome(9, a == b, format!("{} CSV documents, {bytes} bytes, serial vs parallel identical: {}", a.len(), a == b))
}

fn calibration_duration() -> Outcome {
    let mut lines = Vec::new();
    let mut all_within = true;
    for kind in SensorKind::ALL {
        let mut cfg = ScenarioConfig::default();
        cfg.mode = ExperimentMode::Calibrate;
        cfg.sensor.kind = kind;
        cfg.seeds = (1..=10).collect();
        cfg.log_sensors = false;
        let report = runner::run(&cfg, 0).unwrap();
        let times = sorted(report.rows.iter().filter_map(|r| r.calibration_time).collect());
        let reference = kind.reference_calibration_time();
        let Some(median) = runner::percentile(&times, 0.5) else {
            all_within = false;
            lines.push(format!("{kind}: no successful runs"));
            continue;
        };
        let ratio = median / reference;
        let within = (0.5..=2.0).contains(&ratio);
        all_within &= within;
        lines.push(format!("{kind} {median:.0} s vs {reference:.0} s (×{ratio:.2})"));
    }
    outcome(10, all_within, format!("report-only; {}", lines.join(", ")))
}

#[test]
fn acceptance() {
    let mut cfg = ScenarioConfig::default();
    cfg.mode = ExperimentMode::Compare;
    cfg.seeds = (1..=ENSEMBLE).collect();
    cfg.log_sensors = false;
    let started = Instant::now();
    let ensemble = runner::run(&cfg, 0).expect("ensemble runs");
    let ensemble_time = started.elapsed().as_secs_f64();

    let results = [
        formula_exactness(&ensemble),
        catalog_fidelity(),
        trilateration_oracle(),
        ideal_move_count(),
        dof_windows(),
        centimetre_accuracy(&ensemble, ensemble_time),
        calibration_benefit(&ensemble),
        numerical_hygiene(&ensemble),
        determinism(),
        calibration_duration(),
    ];
    let mut unexpected = Vec::new();
    for r in &results {
        let tag = if r.pass { "PASS" } else { "FAIL" };
        let note = match (r.pass, EXPECTED_FAILURES.contains(&r.id), r.id == 10) {
            (false, _, true) => " (not enforced)",
            (false, true, _) => " (expected)",
            _ => "",
        };
        println!("{tag} criterion {:>2}: {}{note}", r.id, r.detail);
        if !r.pass && !EXPECTED_FAILURES.contains(&r.id) && r.id != 10 {
            unexpected.push(r.id);
        }
    }
    assert!(unexpected.is_empty(), "unexpected failures: {unexpected:?}");
}

