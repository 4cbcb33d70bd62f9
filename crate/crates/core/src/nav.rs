//! Source localization with the EKF: probe poses on a spiral around the
//! current estimate, one averaged reading per pose, one update per reading.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::belief::{spiral_direction, RangeModel, SPIRAL_PASS};
use crate::ekf::{EkfError, EkfState, UpdateInfo};
use crate::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavigationConfig {
    /// Updates per run.
    pub steps: usize,
    /// Probe distance from the estimate, mm.
    pub standoff: f64,
    /// Seconds discarded after each move.
    pub settle_time: f64,
    /// Readings averaged per update.
    pub window: usize,
    pub channel: Channel,
    /// Consecutive gated updates after which P returns to its initial
    /// value; 0 disables the reset.
    pub reset_after_gated: usize,
    /// Largest shift of the probe centre between probes, mm.
    pub max_anchor_step: f64,
}

/// Measurement fed to the filter at each probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Averaged reading against the plume model plus the bias state.
    #[default]
    Concentration,
    /// Reading converted to a range through the range model.
    Range,
}

impl Default for NavigationConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            standoff: 280.0,
            settle_time: 6.0,
            window: 11,
            channel: Channel::default(),
            reset_after_gated: 3,
            max_anchor_step: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NavStep {
    pub t: f64,
    pub true_source: Point3<f64>,
    pub estimate: Point3<f64>,
    /// Tip from the encoders, mm.
    pub tip: Point3<f64>,
    pub true_tip: Point3<f64>,
    pub reading: f64,
    pub range: f64,
    pub innovation: f64,
    pub gated: bool,
    pub skipped: bool,
    pub trace_p: f64,
    pub min_eigenvalue: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NavResult {
    pub steps: Vec<NavStep>,
    pub final_estimate: Point3<f64>,
    pub final_error: f64,
    pub filter: EkfState,
}

fn move_to_next_probe(
    world: &mut World,
    filter: &EkfState,
    anchor: &mut Point3<f64>,
    probe: &mut usize,
    cfg: &NavigationConfig,
) {
    let pull = filter.position() - *anchor;
    let norm = pull.norm();
    *anchor += if norm > cfg.max_anchor_step { pull * (cfg.max_anchor_step / norm) } else { pull };
    for _ in 0..SPIRAL_PASS {
        let target = *anchor + spiral_direction(*probe, SPIRAL_PASS) * cfg.standoff;
        *probe += 1;
        if world.arc_to(anchor, &target) {
            return;
        }
    }
    log::debug!("no reachable probe around {anchor:?}");
}

/// Runs `cfg.steps` updates starting from `filter`.
pub fn navigate(world: &mut World, mut filter: EkfState, model: &RangeModel, cfg: &NavigationConfig) -> NavResult {
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut probe = 0usize;
    let mut anchor = filter.position();
    let initial_p = filter.p;
    let mut gated_run = 0usize;
    for _ in 0..cfg.steps {
        move_to_next_probe(world, &filter, &mut anchor, &mut probe, cfg);
        let Some(window) = world.dwell(cfg.settle_time, cfg.window) else {
            continue;
        };
        filter = filter.predict_to(window.t);
        let tip = world.reported_tip();
        let (range, slope) = model.range(window.mean, window.t);
        let outcome = match cfg.channel {
            Channel::Concentration => filter.update_concentration(window.mean, &tip, &world.plume.params),
            Channel::Range => filter.update_range(range, &tip, slope * slope * filter.r),
        };
        let (info, skipped) = match outcome {
            Ok((next, info)) => {
                filter = next;
                (info, false)
            }
            Err(EkfError::SingularGeometry(_)) => (
                UpdateInfo {
                    innovation: f64::NAN,
                    innovation_variance: f64::NAN,
                    nis: f64::NAN,
                    gated: false,
                },
                true,
            ),
            Err(e) => unreachable!("range conversion yields positive ranges: {e}"),
        };
        gated_run = if info.gated { gated_run + 1 } else { 0 };
        if cfg.reset_after_gated > 0 && gated_run >= cfg.reset_after_gated {
            log::debug!("{gated_run} gated updates in a row, covariance reset at t={:.1}", window.t);
            filter.p = initial_p;
            gated_run = 0;
        }
        let true_source = world.plume.center();
        steps.push(NavStep {
            t: window.t,
            true_source,
            estimate: filter.position(),
            tip,
            true_tip: world.true_tip(),
            reading: window.mean,
            range,
            innovation: info.innovation,
            gated: info.gated,
            skipped,
            trace_p: filter.p.trace(),
            min_eigenvalue: filter.min_eigenvalue(),
            error: (filter.position() - true_source).norm(),
        });
    }
    let final_estimate = filter.position();
    NavResult {
        final_error: (final_estimate - world.plume.center()).norm(),
        final_estimate,
        steps,
        filter,
    }
}
