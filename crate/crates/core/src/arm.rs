//! Five-joint arm: forward/inverse kinematics, staged DoF unlocking and
//! encoder drift.
//!
//! Frame convention: Z-up base frame with the shoulder pivot at the origin.
//! Azimuth rotates about Z; elevation, elbow and wrist tilt are pitch joints
//! about the local Y axis, positive raising the tip; wrist roll is about the
//! local X axis (along the last link). At zero angles the arm points along +X.

use nalgebra::{Isometry3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOINT_COUNT: usize = 5;

/// Manufacturer bound on encoder drift, deg/s².
pub const MAX_ENCODER_DRIFT_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    Azimuth,
    Elevation,
    Elbow,
    WristTilt,
    WristRoll,
}

impl Joint {
    pub const ALL: [Joint; JOINT_COUNT] = [
        Joint::Azimuth,
        Joint::Elevation,
        Joint::Elbow,
        Joint::WristTilt,
        Joint::WristRoll,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DofMode {
    #[serde(rename = "dof1")]
    Dof1,
    #[serde(rename = "dof2")]
    Dof2,
    #[serde(rename = "dof3")]
    Dof3,
    #[serde(rename = "dof5")]
    Dof5,
}

impl DofMode {
    pub const STAGED: [DofMode; 4] = [DofMode::Dof1, DofMode::Dof2, DofMode::Dof3, DofMode::Dof5];

    pub fn active_joints(self) -> &'static [Joint] {
        match self {
            DofMode::Dof1 => &Joint::ALL[..1],
            DofMode::Dof2 => &Joint::ALL[..2],
            DofMode::Dof3 => &Joint::ALL[..3],
            DofMode::Dof5 => &Joint::ALL[..],
        }
    }

    pub fn is_active(self, joint: Joint) -> bool {
        self.active_joints().contains(&joint)
    }

    pub fn dof(self) -> usize {
        self.active_joints().len()
    }

    pub fn label(self) -> &'static str {
        match self {
            DofMode::Dof1 => "dof1",
            DofMode::Dof2 => "dof2",
            DofMode::Dof3 => "dof3",
            DofMode::Dof5 => "dof5",
        }
    }
}

impl std::fmt::Display for DofMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for DofMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dof1" | "1" => Ok(DofMode::Dof1),
            "dof2" | "2" => Ok(DofMode::Dof2),
            "dof3" | "3" => Ok(DofMode::Dof3),
            "dof5" | "5" => Ok(DofMode::Dof5),
            other => Err(format!("unknown DoF mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }

    pub fn reversed(self) -> Direction {
        match self {
            Direction::Positive => Direction::Negative,
            Direction::Negative => Direction::Positive,
        }
    }
}

/// One discrete arm move: a signed `step_size` increment on one joint, or nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Stay,
    Move { joint: Joint, direction: Direction },
}

impl Action {
    /// Counter-clockwise seen from above.
    pub const MOVE_LEFT: Action = Action::Move {
        joint: Joint::Azimuth,
        direction: Direction::Positive,
    };
    pub const MOVE_RIGHT: Action = Action::Move {
        joint: Joint::Azimuth,
        direction: Direction::Negative,
    };

    pub fn joint(self) -> Option<Joint> {
        match self {
            Action::Stay => None,
            Action::Move { joint, .. } => Some(joint),
        }
    }

    /// The move undoing this one; `Stay` is its own inverse.
    pub fn inverse(self) -> Action {
        match self {
            Action::Stay => Action::Stay,
            Action::Move { joint, direction } => Action::Move {
                joint,
                direction: direction.reversed(),
            },
        }
    }
}

/// Every action available in `mode`: `Stay` first, then ± per active joint.
pub fn allowed_actions(mode: DofMode) -> Vec<Action> {
    let mut actions = vec![Action::Stay];
    for &joint in mode.active_joints() {
        for direction in [Direction::Positive, Direction::Negative] {
            actions.push(Action::Move { joint, direction });
        }
    }
    actions
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArmError {
    #[error("action {action:?} moves a joint that is inactive in {mode}")]
    ActionNotInDofMode { action: Action, mode: DofMode },
    #[error("invalid arm config: {0}")]
    InvalidConfig(String),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmConfig {
    /// Shoulder→elbow, elbow→wrist, wrist→tip, mm.
    pub link_lengths: [f64; 3],
    /// Sensor board beyond the wrist link, mm.
    pub tool_extension: f64,
    /// Per-joint (min, max) in degrees, ordered as [`Joint::ALL`].
    pub joint_limits: [(f64, f64); JOINT_COUNT],
    /// deg/s²
    pub encoder_drift_rate: f64,
    /// Degrees per discrete move.
    pub step_size: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            link_lengths: [300.0, 250.0, 100.0],
            tool_extension: 100.0,
            joint_limits: [
                (-170.0, 170.0),
                (-90.0, 90.0),
                (-150.0, 150.0),
                (-120.0, 120.0),
                (-180.0, 180.0),
            ],
            encoder_drift_rate: MAX_ENCODER_DRIFT_RATE,
            step_size: 2.0,
        }
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<(), ArmError> {
        if self.link_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(ArmError::InvalidConfig("link lengths must be > 0".into()));
        }
        if !(self.tool_extension >= 0.0) {
            return Err(ArmError::InvalidConfig("tool_extension must be >= 0".into()));
        }
        if !(0.0..=MAX_ENCODER_DRIFT_RATE).contains(&self.encoder_drift_rate) {
            return Err(ArmError::InvalidConfig(format!(
                "encoder_drift_rate must be in [0, {MAX_ENCODER_DRIFT_RATE}]"
            )));
        }
        for (joint, (lo, hi)) in Joint::ALL.iter().zip(self.joint_limits) {
            if !(lo < hi) {
                return Err(ArmError::InvalidConfig(format!(
                    "joint limits for {joint:?} must satisfy min < max"
                )));
            }
        }
        if !(self.step_size > 0.0) {
            return Err(ArmError::InvalidConfig("step_size must be > 0".into()));
        }
        Ok(())
    }

    /// Distance from the shoulder pivot to the tip with the chain straight.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum::<f64>() + self.tool_extension
    }

    fn wrist_to_tip(&self) -> f64 {
        self.link_lengths[2] + self.tool_extension
    }

    pub fn clamp(&self, joint: Joint, angle: f64) -> f64 {
        let (lo, hi) = self.joint_limits[joint.index()];
        angle.clamp(lo, hi)
    }

    pub fn within_limits(&self, angles: &[f64; JOINT_COUNT]) -> bool {
        angles
            .iter()
            .zip(self.joint_limits)
            .all(|(&a, (lo, hi))| a >= lo && a <= hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub mode: DofMode,
    /// True joint angles, deg.
    pub joint_angles: [f64; JOINT_COUNT],
    pub joint_velocities: [f64; JOINT_COUNT],
    /// Error accumulated by the encoders; reported = true + drift.
    pub accumulated_drift: [f64; JOINT_COUNT],
    pub time: f64,
}

impl ArmState {
    pub fn new(mode: DofMode, joint_angles: [f64; JOINT_COUNT]) -> Self {
        Self {
            mode,
            joint_angles,
            joint_velocities: [0.0; JOINT_COUNT],
            accumulated_drift: [0.0; JOINT_COUNT],
            time: 0.0,
        }
    }

    pub fn home(mode: DofMode) -> Self {
        Self::new(mode, [0.0; JOINT_COUNT])
    }

    pub fn with_mode(mut self, mode: DofMode) -> Self {
        self.mode = mode;
        self
    }

    /// What the encoders report.
    pub fn reported_angles(&self) -> [f64; JOINT_COUNT] {
        std::array::from_fn(|i| self.joint_angles[i] + self.accumulated_drift[i])
    }

    /// Advances time by `dt` without commanding a move.
    pub fn idle<R: Rng + ?Sized>(&self, dt: f64, config: &ArmConfig, rng: &mut R) -> ArmState {
        let mut next = self.clone();
        next.joint_velocities = [0.0; JOINT_COUNT];
        next.accrue_drift(dt, config, rng);
        next.time += dt;
        next
    }

    /// Moves directly to `target` (clamped) over `duration` seconds.
    pub fn move_to<R: Rng + ?Sized>(
        &self,
        target: &[f64; JOINT_COUNT],
        duration: f64,
        config: &ArmConfig,
        rng: &mut R,
    ) -> ArmState {
        let mut next = self.clone();
        for joint in Joint::ALL {
            let i = joint.index();
            let angle = config.clamp(joint, target[i]);
            next.joint_velocities[i] = if duration > 0.0 {
                (angle - self.joint_angles[i]) / duration
            } else {
                0.0
            };
            next.joint_angles[i] = angle;
        }
        next.accrue_drift(duration, config, rng);
        next.time += duration;
        next
    }

    fn accrue_drift<R: Rng + ?Sized>(&mut self, dt: f64, config: &ArmConfig, rng: &mut R) {
        let bound = config.encoder_drift_rate * dt * dt / 2.0;
        if bound > 0.0 {
            for d in &mut self.accumulated_drift {
                *d += rng.random_range(-bound..=bound);
            }
        }
    }
}

fn pitch(angle_deg: f64) -> Rotation3<f64> {
    // Positive pitch lifts +X toward +Z.
    Rotation3::from_axis_angle(&Vector3::y_axis(), -angle_deg.to_radians())
}

/// Full tip pose (position in mm, orientation) in the base frame.
pub fn tip_pose(angles: &[f64; JOINT_COUNT], config: &ArmConfig) -> Isometry3<f64> {
    let [az, el, elbow, wrist_tilt, wrist_roll] = *angles;
    let [l1, l2, _] = config.link_lengths;
    let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), az.to_radians());
    let roll = Rotation3::from_axis_angle(&Vector3::x_axis(), wrist_roll.to_radians());
    let link = |len: f64| Isometry3::from_parts(Translation3::new(len, 0.0, 0.0), UnitQuaternion::identity());
    let rot = |r: Rotation3<f64>| Isometry3::from_parts(Translation3::identity(), UnitQuaternion::from_rotation_matrix(&r));

    rot(yaw)
        * rot(pitch(el))
        * link(l1)
        * rot(pitch(elbow))
        * link(l2)
        * rot(pitch(wrist_tilt))
        * rot(roll)
        * link(config.wrist_to_tip())
}

/// Tip position (mm, base frame) for the given joint angles.
pub fn forward_kinematics(angles: &[f64; JOINT_COUNT], config: &ArmConfig) -> Point3<f64> {
    tip_pose(angles, config) * Point3::origin()
}

impl ArmState {
    /// Where the tip actually is.
    pub fn tip_position(&self, config: &ArmConfig) -> Point3<f64> {
        forward_kinematics(&self.joint_angles, config)
    }

    /// Where odometry believes the tip is.
    pub fn reported_tip_position(&self, config: &ArmConfig) -> Point3<f64> {
        forward_kinematics(&self.reported_angles(), config)
    }
}

/// Applies one discrete action and advances time by `dt`.
pub fn apply_action<R: Rng + ?Sized>(
    state: &ArmState,
    action: Action,
    dt: f64,
    config: &ArmConfig,
    rng: &mut R,
) -> Result<ArmState, ArmError> {
    if !(dt > 0.0) {
        return Err(ArmError::NonPositiveStep(dt));
    }
    let mut next = state.clone();
    next.joint_velocities = [0.0; JOINT_COUNT];
    if let Action::Move { joint, direction } = action {
        if !state.mode.is_active(joint) {
            return Err(ArmError::ActionNotInDofMode {
                action,
                mode: state.mode,
            });
        }
        let i = joint.index();
        let target = state.joint_angles[i] + direction.sign() * config.step_size;
        next.joint_angles[i] = config.clamp(joint, target);
        next.joint_velocities[i] = (next.joint_angles[i] - state.joint_angles[i]) / dt;
    }
    next.accrue_drift(dt, config, rng);
    next.time += dt;
    Ok(next)
}

fn wrap_deg(a: f64) -> f64 {
    let mut a = (a + 180.0).rem_euclid(360.0) - 180.0;
    if a == -180.0 {
        a = 180.0;
    }
    a
}

/// Closed-form position IK for azimuth, elevation and elbow with the wrist
/// joints held at their values in `current`. Picks the in-limit solution
/// closest to `current`; `None` when the target is out of reach.
pub fn inverse_kinematics(
    target: &Point3<f64>,
    current: &[f64; JOINT_COUNT],
    config: &ArmConfig,
) -> Option<[f64; JOINT_COUNT]> {
    let [l1, l2, _] = config.link_lengths;
    let l3 = config.wrist_to_tip();
    let wrist = current[Joint::WristTilt.index()].to_radians();
    // Elbow→tip is rigid for a fixed wrist tilt: length `d`, angle `phi` in the elbow frame.
    let (ex, ez) = (l2 + l3 * wrist.cos(), l3 * wrist.sin());
    let d = ex.hypot(ez);
    let phi = ez.atan2(ex);

    let horizontal = target.x.hypot(target.y);
    let mut best: Option<([f64; JOINT_COUNT], f64)> = None;
    for (radial, az) in [
        (horizontal, target.y.atan2(target.x)),
        (-horizontal, (-target.y).atan2(-target.x)),
    ] {
        let rr = radial * radial + target.z * target.z;
        let cos_b = (rr - l1 * l1 - d * d) / (2.0 * l1 * d);
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&cos_b) {
            continue;
        }
        let b_abs = cos_b.clamp(-1.0, 1.0).acos();
        for b in [b_abs, -b_abs] {
            let elev = target.z.atan2(radial) - (d * b.sin()).atan2(l1 + d * b.cos());
            let elbow = b - phi;
            let mut cand = *current;
            cand[Joint::Azimuth.index()] = wrap_deg(az.to_degrees());
            cand[Joint::Elevation.index()] = wrap_deg(elev.to_degrees());
            cand[Joint::Elbow.index()] = wrap_deg(elbow.to_degrees());
            if !config.within_limits(&cand) {
                continue;
            }
            let cost: f64 = (0..3).map(|i| (cand[i] - current[i]).powi(2)).sum();
            if best.as_ref().is_none_or(|(_, c)| cost < *c) {
                best = Some((cand, cost));
            }
        }
    }
    best.map(|(angles, _)| angles)
}
