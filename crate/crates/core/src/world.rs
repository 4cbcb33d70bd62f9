//! Simulated bench: one arm carrying a sensor pair through a plume, on a
//! single clock. Everything that consumes simulated time goes through here.

use nalgebra::Point3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arm::{self, Action, ArmConfig, ArmError, ArmState, DofMode, JOINT_COUNT};
use crate::plume::PlumeField;
use crate::sensor::{PairedSample, Reading, SensorPair};

/// Random stream ids; each consumer of randomness owns one.
pub(crate) mod streams {
    pub const ARM: u64 = 10;
    pub const PRIOR: u64 = 20;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensorLogRow {
    pub t: f64,
    pub sensor_id: usize,
    pub raw: Option<f64>,
    pub enabled: bool,
}

#[derive(Debug, Clone)]
pub struct World {
    pub plume: PlumeField,
    pub arm_config: ArmConfig,
    pub arm: ArmState,
    pub sensors: SensorPair,
    /// Interval between sensor samples, s.
    pub sample_period: f64,
    /// Time for one inverse-kinematic reposition, s.
    pub move_duration: f64,
    pub log_sensors: bool,
    pub sensor_log: Vec<SensorLogRow>,
    arm_rng: ChaCha8Rng,
}

/// Summary of a block of samples taken at a fixed pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
    pub count: usize,
    /// Mean sample time.
    pub t: f64,
}

impl Window {
    pub fn from_readings(values: &[f64], t: f64) -> Option<Window> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Window {
            mean,
            std,
            count: values.len(),
            t,
        })
    }

    /// Variance of the window mean, s²/n.
    pub fn mean_variance(&self) -> f64 {
        self.std * self.std / self.count as f64
    }
}

impl World {
    pub fn new(
        plume: PlumeField,
        arm_config: ArmConfig,
        arm: ArmState,
        sensors: SensorPair,
        sample_period: f64,
        seed: u64,
    ) -> Self {
        let mut arm_rng = ChaCha8Rng::seed_from_u64(seed);
        arm_rng.set_stream(streams::ARM);
        Self {
            plume,
            arm_config,
            arm,
            sensors,
            sample_period,
            move_duration: 1.0,
            log_sensors: false,
            sensor_log: Vec::new(),
            arm_rng,
        }
    }

    pub fn time(&self) -> f64 {
        self.plume.t
    }

    pub fn true_tip(&self) -> Point3<f64> {
        self.arm.tip_position(&self.arm_config)
    }

    /// Tip position from the (drifting) encoders.
    pub fn reported_tip(&self) -> Point3<f64> {
        self.arm.reported_tip_position(&self.arm_config)
    }

    pub fn set_mode(&mut self, mode: DofMode) {
        self.arm.mode = mode;
    }

    fn sense(&mut self, dt: f64) -> PairedSample {
        self.plume = self.plume.step(dt);
        let ppm = self.plume.concentration_at(&self.true_tip());
        let s = self.sensors.paired_sample(ppm, dt);
        if self.log_sensors {
            let t = self.time();
            for (id, (raw, enabled)) in s.raw.iter().zip(s.enabled).enumerate() {
                self.sensor_log.push(SensorLogRow {
                    t,
                    sensor_id: id,
                    raw: raw.value(),
                    enabled,
                });
            }
        }
        s
    }

    /// Holds the pose for one sample period.
    pub fn sample(&mut self) -> Reading {
        let dt = self.sample_period;
        self.arm = self.arm.idle(dt, &self.arm_config, &mut self.arm_rng);
        self.sense(dt).reading
    }

    /// One discrete move lasting one sample period, sensing at the new pose.
    pub fn act(&mut self, action: Action) -> Result<Reading, ArmError> {
        let dt = self.sample_period;
        self.arm = arm::apply_action(&self.arm, action, dt, &self.arm_config, &mut self.arm_rng)?;
        Ok(self.sense(dt).reading)
    }

    /// Interpolated reposition to `target` joint angles, sampling on the way.
    pub fn move_to(&mut self, target: &[f64; JOINT_COUNT]) {
        let dt = self.sample_period;
        let steps = (self.move_duration / dt).ceil().max(1.0) as usize;
        let start = self.arm.joint_angles;
        for i in 1..=steps {
            let f = i as f64 / steps as f64;
            let waypoint: [f64; JOINT_COUNT] = std::array::from_fn(|j| start[j] + f * (target[j] - start[j]));
            self.arm = self.arm.move_to(&waypoint, dt, &self.arm_config, &mut self.arm_rng);
            self.sense(dt);
        }
        self.arm.joint_velocities = [0.0; JOINT_COUNT];
    }

    /// Moves the tip to `target` (base frame) if reachable.
    pub fn move_tip_to(&mut self, target: &Point3<f64>) -> bool {
        match arm::inverse_kinematics(target, &self.arm.joint_angles, &self.arm_config) {
            Some(angles) => {
                self.move_to(&angles);
                true
            }
            None => false,
        }
    }

    /// Walks the tip through `points`, one sample period per point, with
    /// inverse kinematics seeded from the previous pose. Stops at the first
    /// unreachable point and returns false.
    pub fn follow_tip_path(&mut self, points: &[Point3<f64>]) -> bool {
        let dt = self.sample_period;
        for p in points {
            let Some(angles) = arm::inverse_kinematics(p, &self.arm.joint_angles, &self.arm_config) else {
                return false;
            };
            self.arm = self.arm.move_to(&angles, dt, &self.arm_config, &mut self.arm_rng);
            self.sense(dt);
        }
        self.arm.joint_velocities = [0.0; JOINT_COUNT];
        true
    }

    /// Moves to `target` along the arc of the sphere around `center` that
    /// passes through the current tip, falling back to a joint-space move.
    pub fn arc_to(&mut self, center: &Point3<f64>, target: &Point3<f64>) -> bool {
        let Some(goal) = arm::inverse_kinematics(target, &self.arm.joint_angles, &self.arm_config) else {
            return false;
        };
        let from = self.true_tip() - center;
        let to = target - center;
        let steps = (self.move_duration / self.sample_period).ceil().max(1.0) as usize;
        let path: Vec<Point3<f64>> = match (from.try_normalize(1e-9), to.try_normalize(1e-9)) {
            (Some(a), Some(b)) if a.dot(&b) > -0.99 => {
                let (ra, rb) = (from.norm(), to.norm());
                let angle = a.angle(&b);
                let axis = a.cross(&b).try_normalize(1e-12);
                (1..=steps)
                    .map(|i| {
                        let f = i as f64 / steps as f64;
                        let dir = match axis {
                            Some(axis) => nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), f * angle) * a,
                            None => b,
                        };
                        center + dir * (ra + f * (rb - ra))
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        if path.is_empty() || !self.follow_tip_path(&path[..path.len() - 1]) {
            self.move_to(&goal);
            return true;
        }
        // Land exactly on the requested pose.
        self.arm = self.arm.move_to(&goal, self.sample_period, &self.arm_config, &mut self.arm_rng);
        self.sense(self.sample_period);
        self.arm.joint_velocities = [0.0; JOINT_COUNT];
        true
    }

    /// Samples until the pair produces a reading; gives up after `max_time`.
    pub fn warm_up(&mut self, max_time: f64) -> bool {
        let until = self.time() + max_time;
        while self.time() < until {
            if self.sample().is_ready() {
                return true;
            }
        }
        false
    }

    /// Discards `settle` seconds of samples, then returns up to `count`
    /// valid readings.
    pub fn collect(&mut self, settle: f64, count: usize) -> Vec<f64> {
        let settle_samples = (settle / self.sample_period).round() as usize;
        for _ in 0..settle_samples {
            self.sample();
        }
        let mut values = Vec::with_capacity(count);
        let mut attempts = 0;
        while values.len() < count && attempts < 4 * count + 8 {
            if let Some(v) = self.sample().value() {
                values.push(v);
            }
            attempts += 1;
        }
        values
    }

    /// [`World::collect`] summarised as a window.
    pub fn dwell(&mut self, settle: f64, count: usize) -> Option<Window> {
        let values = self.collect(settle, count);
        let span = values.len().saturating_sub(1) as f64 * self.sample_period;
        Window::from_readings(&values, self.time() - span / 2.0)
    }
}
