//! Scenario configuration: one TOML file describing the plume, sensors,
//! arm, calibration protocol, navigation and the seed ensemble.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{ArmConfig, ArmState, DofMode, JOINT_COUNT};
use crate::belief::RangeModelConfig;
use crate::calibration::ProtocolConfig;
use crate::ekf::NoiseTuning;
use crate::nav::NavigationConfig;
use crate::plume::{PlumeField, PlumeParams};
use crate::sensor::{catalog, SensorKind, SensorPair, SensorSpec};
use crate::world::World;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("config error in `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    Calibrate,
    NavigateCold,
    NavigateCalibrated,
    Compare,
}

/// Sensor family plus optional per-field overrides of its catalog entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub kind: SensorKind,
    /// Zero noise, drift and hysteresis, applied before the overrides.
    pub noiseless: bool,
    pub tau_lower: Option<f64>,
    pub tau_upper: Option<f64>,
    pub noise_std: Option<f64>,
    pub warmup_time: Option<f64>,
    pub drift_walk_std: Option<f64>,
    pub hysteresis_coeff: Option<f64>,
    /// Enable half-period of the pair; defaults to the sample period.
    pub duty_period: Option<f64>,
    /// σ of multiplicative log-normal input noise; 0 disables it.
    pub turbulence_sigma: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            kind: SensorKind::Ec,
            noiseless: false,
            tau_lower: None,
            tau_upper: None,
            noise_std: None,
            warmup_time: None,
            drift_walk_std: None,
            hysteresis_coeff: None,
            duty_period: None,
            turbulence_sigma: 0.0,
        }
    }
}

impl SensorConfig {
    pub fn spec(&self) -> SensorSpec {
        let mut spec = catalog(self.kind);
        if self.noiseless {
            spec = spec.noiseless();
        }
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut spec.tau_lower, self.tau_lower);
        set(&mut spec.tau_upper, self.tau_upper);
        set(&mut spec.noise_std, self.noise_std);
        set(&mut spec.warmup_time, self.warmup_time);
        set(&mut spec.drift_walk_std, self.drift_walk_std);
        set(&mut spec.hysteresis_coeff, self.hysteresis_coeff);
        spec
    }
}

/// Arm geometry plus the pose every run starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmSetup {
    #[serde(flatten)]
    pub config: ArmConfig,
    /// deg
    pub start_angles: [f64; JOINT_COUNT],
}

impl Default for ArmSetup {
    fn default() -> Self {
        Self {
            config: ArmConfig::default(),
            start_angles: [0.0, 20.0, -20.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavigationSetup {
    #[serde(flatten)]
    pub config: NavigationConfig,
    /// Std of the initial source guess around the truth, per axis, mm.
    pub prior_std: f64,
    /// Initial bias std, ppm.
    pub prior_bias_std: f64,
    /// Process noise of the uncalibrated filter, mm²/s.
    pub cold_q_position: f64,
    /// Mode whose Type A uncertainty sets R.
    pub mode: DofMode,
    pub range_model: RangeModelConfig,
    pub tuning: NoiseTuning,
}

impl Default for NavigationSetup {
    fn default() -> Self {
        Self {
            config: NavigationConfig::default(),
            prior_std: 100.0,
            prior_bias_std: 5.0,
            cold_q_position: 100.0 * 100.0,
            mode: DofMode::Dof5,
            range_model: RangeModelConfig::default(),
            tuning: NoiseTuning::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: ExperimentMode,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// s
    pub sample_period: f64,
    /// Duration of one inverse-kinematic reposition, s.
    pub move_duration: f64,
    /// Write per-sample sensor logs.
    pub log_sensors: bool,
    pub plume: PlumeParams,
    pub sensor: SensorConfig,
    pub arm: ArmSetup,
    pub calibration: ProtocolConfig,
    pub navigation: NavigationSetup,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: ExperimentMode::Compare,
            seeds: (1..=10).collect(),
            output_dir: PathBuf::from("oio-out"),
            sample_period: 0.5,
            move_duration: 1.0,
            log_sensors: true,
            plume: PlumeParams::default(),
            sensor: SensorConfig::default(),
            arm: ArmSetup::default(),
            calibration: ProtocolConfig::default(),
            navigation: NavigationSetup::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be a positive number, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = e
                .span()
                .and_then(|span| text.get(span))
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty() && s.len() < 64)
                .unwrap_or_else(|| "<document>".to_string());
            ConfigError::new(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed is required"));
        }
        positive("sample_period", self.sample_period)?;
        positive("move_duration", self.move_duration)?;
        self.plume.validate().map_err(|e| ConfigError::new("plume", e.0))?;
        self.arm.config.validate().map_err(|e| ConfigError::new("arm", e.to_string()))?;
        if !self.arm.config.within_limits(&self.arm.start_angles) {
            return Err(ConfigError::new("arm.start_angles", "outside the joint limits"));
        }
        let spec = self.sensor.spec();
        spec.validate().map_err(|e| ConfigError::new("sensor", e.0))?;
        if self.sample_period < spec.tau_lower {
            return Err(ConfigError::new(
                "sample_period",
                format!("must be >= sensor tau_lower ({})", spec.tau_lower),
            ));
        }
        if let Some(d) = self.sensor.duty_period {
            positive("sensor.duty_period", d)?;
        }
        if !(self.sensor.turbulence_sigma >= 0.0) {
            return Err(ConfigError::new("sensor.turbulence_sigma", "must be >= 0"));
        }
        let cal = &self.calibration;
        if cal.schedule.is_empty() {
            return Err(ConfigError::new("calibration.schedule", "must list at least one DoF mode"));
        }
        if cal.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::new("calibration.schedule", "modes must be strictly increasing"));
        }
        if cal.stage_budget == 0 {
            return Err(ConfigError::new("calibration.stage_budget", "must be > 0"));
        }
        if cal.max_reversals == 0 {
            return Err(ConfigError::new("calibration.max_reversals", "must be > 0"));
        }
        if !(cal.settle_time >= 0.0) {
            return Err(ConfigError::new("calibration.settle_time", "must be >= 0"));
        }
        let loc = &cal.localize;
        positive("calibration.localize.probe_edge", loc.probe_edge)?;
        positive("calibration.localize.standoff", loc.standoff)?;
        positive("calibration.localize.precision_target", loc.precision_target)?;
        positive("calibration.localize.residual_threshold", loc.residual_threshold)?;
        if loc.window < 2 {
            return Err(ConfigError::new("calibration.localize.window", "must be >= 2"));
        }
        if !(loc.min_snr >= 0.0) {
            return Err(ConfigError::new("calibration.localize.min_snr", "must be >= 0"));
        }
        if loc.min_observations < 4 {
            return Err(ConfigError::new("calibration.localize.min_observations", "must be >= 4"));
        }
        cal.range_model
            .validate()
            .map_err(|e| ConfigError::new("calibration.range_model", e.to_string()))?;
        let nav = &self.navigation;
        if nav.config.steps == 0 {
            return Err(ConfigError::new("navigation.steps", "must be > 0"));
        }
        if nav.config.window < 2 {
            return Err(ConfigError::new("navigation.window", "must be >= 2"));
        }
        positive("navigation.standoff", nav.config.standoff)?;
        positive("navigation.prior_std", nav.prior_std)?;
        if !(nav.cold_q_position >= 0.0) {
            return Err(ConfigError::new("navigation.cold_q_position", "must be >= 0"));
        }
        if !(nav.tuning.q_scale >= 0.0 && nav.tuning.r_scale >= 0.0) {
            return Err(ConfigError::new("navigation.tuning", "scales must be >= 0"));
        }
        nav.range_model
            .validate()
            .map_err(|e| ConfigError::new("navigation.range_model", e.to_string()))?;
        Ok(())
    }

    /// Fresh bench for one run; `seed` drives every random stream in it.
    pub fn build_world(&self, seed: u64) -> World {
        let spec = self.sensor.spec();
        let duty = self.sensor.duty_period.unwrap_or(self.sample_period);
        let mut sensors = SensorPair::new(spec, duty, seed);
        sensors.set_turbulence(self.sensor.turbulence_sigma);
        let plume = PlumeField::new(self.plume).expect("validated plume");
        let arm = ArmState::new(DofMode::Dof1, self.arm.start_angles);
        let mut world = World::new(plume, self.arm.config.clone(), arm, sensors, self.sample_period, seed);
        world.move_duration = self.move_duration;
        world.log_sensors = self.log_sensors;
        world
    }
}
