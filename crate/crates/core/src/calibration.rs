//! Two-stage calibration: per-DoF Type A uncertainty from casting sweeps,
//! then a whole-arm Type B uncertainty from belief-map localization.

use std::collections::BTreeMap;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{Action, ArmError, Direction, DofMode, Joint, JOINT_COUNT};
use crate::belief::{self, BeliefError, BeliefResult, LocalizeOptions, ProbeRecord, RangeModelConfig};
use crate::bout::{window_for_dof, BaselineRule, BoutDecision, BoutError, BoutState, BASELINE_LEN};
use crate::world::World;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("need at least {needed} readings, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("localization did not converge")]
    LocalizationDidNotConverge,
    #[error("{mode} stage exhausted its budget of {budget} moves")]
    StageBudgetExhausted { mode: DofMode, budget: usize },
    #[error("sensors never became ready")]
    SensorsNotReady,
    #[error(transparent)]
    Bout(#[from] BoutError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Arm(#[from] ArmError),
}

/// s/√k
pub fn type_a(s: f64, k: usize) -> f64 {
    s / (k as f64).sqrt()
}

/// 2v/√m
pub fn type_b(v: f64, m: usize) -> f64 {
    2.0 * v / (m as f64).sqrt()
}

/// Sample standard deviation (n − 1), two-pass.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeA {
    /// ppm
    pub s: f64,
    pub k: usize,
    /// ppm
    pub u_a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeB {
    /// Vertex-to-source distance, mm.
    pub v: f64,
    pub m: usize,
    /// mm
    pub u_b: f64,
}

/// Type A statistics over the final `window_for_dof(mode)` readings.
pub fn calibrate_type_a(series: &[f64], mode: DofMode) -> Result<TypeA, CalibrationError> {
    let k = window_for_dof(mode);
    if series.len() < k {
        return Err(CalibrationError::InsufficientSamples {
            needed: k,
            got: series.len(),
        });
    }
    let s = sample_std(&series[series.len() - k..]);
    Ok(TypeA { s, k, u_a: type_a(s, k) })
}

pub fn calibrate_type_b(localization: &BeliefResult, truth: &Point3<f64>) -> Result<TypeB, CalibrationError> {
    let vertex = localization.vertex.ok_or(CalibrationError::LocalizationDidNotConverge)?;
    let v = (vertex - truth).norm();
    let m = localization.m;
    Ok(TypeB { v, m, u_b: type_b(v, m) })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBudget {
    pub type_a: BTreeMap<DofMode, TypeA>,
    pub type_b: Option<TypeB>,
}

impl UncertaintyBudget {
    pub fn u_a(&self, mode: DofMode) -> Option<f64> {
        self.type_a.get(&mode).map(|a| a.u_a)
    }

    pub fn u_b(&self) -> Option<f64> {
        self.type_b.map(|b| b.u_b)
    }

    /// Type A for every staged mode plus Type B.
    pub fn is_complete(&self) -> bool {
        DofMode::STAGED.iter().all(|m| self.type_a.contains_key(m)) && self.type_b.is_some()
    }
}

/// Tunables of the greedy casting policy for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CastingPolicy {
    pub sweep_joint: Joint,
    /// |δ| below this counts as flat, ppm.
    pub dead_band: f64,
    /// Smoothed level above which a flat signal means arrival, ppm.
    pub proximity_threshold: f64,
}

/// Joint a stage sweeps: the one it unlocks. Wrist roll does not move the
/// tip, so the 5-DoF stage sweeps wrist tilt.
pub fn sweep_joint(mode: DofMode) -> Joint {
    match mode {
        DofMode::Dof1 => Joint::Azimuth,
        DofMode::Dof2 => Joint::Elevation,
        DofMode::Dof3 => Joint::Elbow,
        DofMode::Dof5 => Joint::WristTilt,
    }
}

/// Greedy casting: keep going while bouts continue, turn back when they
/// stop, hold still on a flat signal near the source.
pub fn bandit_policy(decision: &BoutDecision, last_action: Action, mode: DofMode, policy: &CastingPolicy) -> Action {
    if decision.delta.abs() < policy.dead_band && decision.smoothed > policy.proximity_threshold {
        return Action::Stay;
    }
    let joint = match last_action {
        Action::Move { joint, .. } if mode.is_active(joint) => joint,
        _ => policy.sweep_joint,
    };
    let direction = match last_action {
        Action::Move { direction, .. } => direction,
        Action::Stay => Direction::Negative,
    };
    if decision.is_bout {
        match last_action {
            Action::Stay => Action::Stay,
            _ => Action::Move { joint, direction },
        }
    } else {
        Action::Move {
            joint,
            direction: direction.reversed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub schedule: Vec<DofMode>,
    /// Moves allowed per casting stage.
    pub stage_budget: usize,
    /// A stage ends after this many direction reversals.
    pub max_reversals: usize,
    /// Fraction of the plume amplitude treated as "at the source".
    pub proximity_fraction: f64,
    /// Seconds discarded before the Type A window at the end of a stage.
    pub settle_time: f64,
    pub baseline_rule: BaselineRule,
    /// Longest wait for both sensors to produce readings, s.
    pub max_warmup: f64,
    pub localize: LocalizeOptions,
    pub range_model: RangeModelConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            schedule: DofMode::STAGED.to_vec(),
            stage_budget: 200,
            max_reversals: 6,
            proximity_fraction: 0.5,
            settle_time: 3.0,
            baseline_rule: BaselineRule::Max,
            max_warmup: 600.0,
            localize: LocalizeOptions::default(),
            range_model: RangeModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageLog {
    pub mode: DofMode,
    pub k: usize,
    pub moves: usize,
    pub reversals: usize,
    pub arrived: bool,
    pub t_start: f64,
    pub t_end: f64,
    /// Readings the Type A statistics were computed from.
    pub window: Vec<f64>,
    pub type_a: TypeA,
    pub best_angles: [f64; JOINT_COUNT],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationLog {
    pub vertex: Point3<f64>,
    /// Advected source centre when localization finished.
    pub truth: Point3<f64>,
    pub residual: f64,
    pub measurements: usize,
    pub type_b: TypeB,
    pub t_start: f64,
    pub t_end: f64,
    pub probes: Vec<ProbeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub sensor_kind: crate::sensor::SensorKind,
    pub budget: UncertaintyBudget,
    pub baseline: [f64; BASELINE_LEN],
    pub stages: Vec<StageLog>,
    pub localization: LocalizationLog,
    /// Simulated time at which the sensors became ready, s.
    pub warmup_end: f64,
    /// Simulated calibration time after warm-up, s.
    pub calibration_time: f64,
}

fn valid_readings(world: &mut World, count: usize) -> Result<Vec<f64>, CalibrationError> {
    let values = world.collect(0.0, count);
    if values.len() < count {
        return Err(CalibrationError::InsufficientSamples {
            needed: count,
            got: values.len(),
        });
    }
    Ok(values)
}

fn cast_stage(
    world: &mut World,
    bout: &mut BoutState,
    mode: DofMode,
    cfg: &ProtocolConfig,
) -> Result<StageLog, CalibrationError> {
    let k = window_for_dof(mode);
    world.set_mode(mode);
    bout.set_window(k)?;
    let policy = CastingPolicy {
        sweep_joint: sweep_joint(mode),
        dead_band: world.sensors.sensors[0].spec.noise_std / (k as f64).sqrt(),
        proximity_threshold: cfg.proximity_fraction * world.plume.params.amplitude,
    };
    let t_start = world.time();
    let mut action = Action::Move {
        joint: policy.sweep_joint,
        direction: Direction::Positive,
    };
    let mut best = (f64::NEG_INFINITY, world.arm.joint_angles);
    let (mut moves, mut reversals, mut arrived) = (0, 0, false);
    loop {
        if moves >= cfg.stage_budget {
            return Err(CalibrationError::StageBudgetExhausted {
                mode,
                budget: cfg.stage_budget,
            });
        }
        let reading = world.act(action)?;
        moves += 1;
        let Some(y) = reading.value() else {
            continue;
        };
        let decision = bout.update(y)?;
        if decision.smoothed > best.0 {
            best = (decision.smoothed, world.arm.joint_angles);
        }
        let next = bandit_policy(&decision, action, mode, &policy);
        if next == Action::Stay {
            arrived = true;
            break;
        }
        if next == action.inverse() {
            reversals += 1;
            if reversals >= cfg.max_reversals {
                break;
            }
        }
        action = next;
    }
    if !arrived {
        world.move_to(&best.1);
    }
    let window = world.collect(cfg.settle_time, k);
    let type_a = calibrate_type_a(&window, mode)?;
    Ok(StageLog {
        mode,
        k,
        moves,
        reversals,
        arrived,
        t_start,
        t_end: world.time(),
        window,
        type_a,
        best_angles: world.arm.joint_angles,
    })
}

/// Runs warm-up, baseline capture, the casting stages in schedule order
/// and a full-DoF localization, returning the populated budget.
pub fn run_protocol(world: &mut World, cfg: &ProtocolConfig) -> Result<CalibrationReport, CalibrationError> {
    if !world.warm_up(cfg.max_warmup) {
        return Err(CalibrationError::SensorsNotReady);
    }
    let warmup_end = world.time();
    let first = cfg.schedule.first().copied().unwrap_or(DofMode::Dof1);
    let baseline = valid_readings(world, BASELINE_LEN)?;
    let mut bout = BoutState::capture_baseline(&baseline, window_for_dof(first), cfg.baseline_rule)?;

    let mut budget = UncertaintyBudget::default();
    let mut stages = Vec::with_capacity(cfg.schedule.len());
    for &mode in &cfg.schedule {
        let log = cast_stage(world, &mut bout, mode, cfg)?;
        log::debug!("{mode} stage: {} moves, s = {:.4}", log.moves, log.type_a.s);
        budget.type_a.insert(mode, log.type_a);
        stages.push(log);
    }

    world.set_mode(DofMode::Dof5);
    let t_start = world.time();
    let model = cfg.range_model.build(&world.plume.params, t_start);
    let result = belief::localize(world, &model, &cfg.localize)?;
    let truth = world.plume.center();
    let type_b = calibrate_type_b(&result, &truth)?;
    budget.type_b = Some(type_b);
    let localization = LocalizationLog {
        vertex: result.vertex.ok_or(CalibrationError::LocalizationDidNotConverge)?,
        truth,
        residual: result.residual,
        measurements: result.measurements(),
        type_b,
        t_start,
        t_end: world.time(),
        probes: result.trajectory,
    };
    Ok(CalibrationReport {
        sensor_kind: world.sensors.kind(),
        budget,
        baseline: baseline.try_into().expect("baseline length checked"),
        stages,
        localization,
        warmup_end,
        calibration_time: world.time() - warmup_end,
    })
}
