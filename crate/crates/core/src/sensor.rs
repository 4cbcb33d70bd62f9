//! Gas-sensor simulation for the five supported families: first-order
//! response lag, rise/fall hysteresis, random-walk baseline drift, additive
//! noise and a warm-up gate. Paired sensors alternate duty and their last
//! valid readings are averaged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Ndir,
    Pa,
    Ec,
    MoxMq,
    MoxMics,
}

impl SensorKind {
    pub const ALL: [SensorKind; 5] = [
        SensorKind::Ndir,
        SensorKind::Pa,
        SensorKind::Ec,
        SensorKind::MoxMq,
        SensorKind::MoxMics,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SensorKind::Ndir => "ndir",
            SensorKind::Pa => "pa",
            SensorKind::Ec => "ec",
            SensorKind::MoxMq => "mox_mq",
            SensorKind::MoxMics => "mox_mics",
        }
    }

    /// Measured end-to-end calibration time of the reference rig, seconds.
    /// Used for reporting only.
    pub fn reference_calibration_time(self) -> f64 {
        match self {
            SensorKind::Ndir => 51.0,
            SensorKind::Pa => 55.0,
            SensorKind::Ec => 87.0,
            SensorKind::MoxMq => 89.0,
            SensorKind::MoxMics => 71.0,
        }
    }
}

impl std::fmt::Display for SensorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for SensorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SensorKind::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown sensor kind `{s}`"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid sensor spec: {0}")]
pub struct SensorSpecError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub kind: SensorKind,
    /// s
    pub tau_lower: f64,
    /// s
    pub tau_upper: f64,
    /// 1σ additive noise, ppm.
    pub noise_std: f64,
    /// s
    pub warmup_time: f64,
    /// ppm/√s
    pub drift_walk_std: f64,
    /// Falling-edge slowdown, in [0, 1).
    pub hysteresis_coeff: f64,
}

impl SensorSpec {
    /// Noise is allowed to be zero so that noiseless scenarios can be built.
    pub fn validate(&self) -> Result<(), SensorSpecError> {
        if !(self.tau_lower > 0.0 && self.tau_lower <= self.tau_upper) {
            return Err(SensorSpecError("need 0 < tau_lower <= tau_upper".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(SensorSpecError("noise_std must be >= 0".into()));
        }
        if !(self.warmup_time >= 0.0) {
            return Err(SensorSpecError("warmup_time must be >= 0".into()));
        }
        if !(self.drift_walk_std >= 0.0) {
            return Err(SensorSpecError("drift_walk_std must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.hysteresis_coeff) {
            return Err(SensorSpecError("hysteresis_coeff must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Zero noise, drift and hysteresis.
    pub fn noiseless(mut self) -> Self {
        self.noise_std = 0.0;
        self.drift_walk_std = 0.0;
        self.hysteresis_coeff = 0.0;
        self
    }
}

/// Built-in parameters per sensor family. τ bounds and error are the
/// measured datasheet-rig values; warm-up, drift and hysteresis are
/// modelling defaults (optical families are faster and hysteresis-free).
pub fn catalog(kind: SensorKind) -> SensorSpec {
    let (tau_lower, tau_upper, noise_std) = match kind {
        SensorKind::Ndir => (0.1, 1.0, 30.0),
        SensorKind::Pa => (0.2, 1.0, 50.0),
        SensorKind::Ec => (0.5, 6.0, 20.0),
        SensorKind::MoxMq => (0.5, 3.0, 100.0),
        SensorKind::MoxMics => (0.1, 3.0, 100.0),
    };
    let (warmup_time, drift_walk_std, hysteresis_coeff) = match kind {
        SensorKind::Ndir | SensorKind::Pa => (10.0, 0.05, 0.0),
        SensorKind::Ec => (30.0, 0.2, 0.3),
        SensorKind::MoxMq | SensorKind::MoxMics => (60.0, 0.5, 0.3),
    };
    SensorSpec {
        kind,
        tau_lower,
        tau_upper,
        noise_std,
        warmup_time,
        drift_walk_std,
        hysteresis_coeff,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotReady {
    WarmingUp,
    Disabled,
    /// Sampling interval below `tau_lower`.
    TooFast,
    /// A paired sensor has not produced a valid reading yet.
    AwaitingPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Reading {
    Ready(f64),
    NotReady(NotReady),
}

impl Reading {
    pub fn value(self) -> Option<f64> {
        match self {
            Reading::Ready(v) => Some(v),
            Reading::NotReady(_) => None,
        }
    }

    pub fn is_ready(self) -> bool {
        matches!(self, Reading::Ready(_))
    }
}

#[derive(Debug, Clone)]
pub struct SensorState {
    pub spec: SensorSpec,
    /// Time constant drawn once from [tau_lower, tau_upper].
    pub tau_eff: f64,
    /// Lagged concentration, ppm.
    pub response: f64,
    /// Accumulated baseline drift, ppm.
    pub bias: f64,
    pub age: f64,
    pub enabled: bool,
    /// Log-normal multiplicative intermittency on the input; 0 disables it.
    pub turbulence_sigma: f64,
    rng: ChaCha8Rng,
}

impl SensorState {
    /// Powers on a sensor with its own random stream `(seed, stream)`.
    pub fn new(spec: SensorSpec, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let tau_eff = if spec.tau_upper > spec.tau_lower {
            rng.random_range(spec.tau_lower..=spec.tau_upper)
        } else {
            spec.tau_lower
        };
        Self {
            spec,
            tau_eff,
            response: 0.0,
            bias: 0.0,
            age: 0.0,
            enabled: true,
            turbulence_sigma: 0.0,
            rng,
        }
    }

    pub fn is_warm(&self) -> bool {
        self.age >= self.spec.warmup_time
    }

    /// Advances the sensor by `dt` while exposed to `true_ppm`.
    ///
    /// Physics (lag, drift, age) advance even when the result is `NotReady`.
    pub fn sample(&mut self, true_ppm: f64, dt: f64) -> Reading {
        debug_assert!(dt > 0.0);
        let input = if self.turbulence_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let s = self.turbulence_sigma;
            true_ppm * (s * z - 0.5 * s * s).exp()
        } else {
            true_ppm
        };

        let tau = if input < self.response {
            self.tau_eff / (1.0 - self.spec.hysteresis_coeff)
        } else {
            self.tau_eff
        };
        let gain = (dt / tau).min(1.0);
        self.response = (self.response + gain * (input - self.response)).max(0.0);

        if self.spec.drift_walk_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.bias += self.spec.drift_walk_std * dt.sqrt() * z;
        }
        let noise = if self.spec.noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.spec.noise_std * z
        } else {
            0.0
        };
        self.age += dt;

        if !self.enabled {
            Reading::NotReady(NotReady::Disabled)
        } else if !self.is_warm() {
            Reading::NotReady(NotReady::WarmingUp)
        } else if dt < self.spec.tau_lower {
            Reading::NotReady(NotReady::TooFast)
        } else {
            Reading::Ready((self.response + self.bias + noise).max(0.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedSample {
    pub reading: Reading,
    pub raw: [Reading; 2],
    /// Enable flags in effect while this sample was taken.
    pub enabled: [bool; 2],
}

/// Two same-kind sensors on one tool head, alternately powered.
#[derive(Debug, Clone)]
pub struct SensorPair {
    pub sensors: [SensorState; 2],
    /// Half-period of the enable oscillation, s.
    pub duty_period: f64,
    phase_elapsed: f64,
    held: [Option<f64>; 2],
}

impl SensorPair {
    pub fn new(spec: SensorSpec, duty_period: f64, seed: u64) -> Self {
        let mut primary = SensorState::new(spec, seed, 1);
        let mut secondary = SensorState::new(spec, seed, 2);
        primary.enabled = true;
        secondary.enabled = false;
        Self::from_states(primary, secondary, duty_period)
    }

    pub fn from_states(mut primary: SensorState, mut secondary: SensorState, duty_period: f64) -> Self {
        assert!(duty_period > 0.0, "duty period must be positive");
        primary.enabled = true;
        secondary.enabled = false;
        Self {
            sensors: [primary, secondary],
            duty_period,
            phase_elapsed: 0.0,
            held: [None, None],
        }
    }

    pub fn kind(&self) -> SensorKind {
        self.sensors[0].spec.kind
    }

    pub fn enabled(&self) -> [bool; 2] {
        [self.sensors[0].enabled, self.sensors[1].enabled]
    }

    pub fn held(&self) -> [Option<f64>; 2] {
        self.held
    }

    /// Mean of the two drift biases, ppm.
    pub fn mean_bias(&self) -> f64 {
        0.5 * (self.sensors[0].bias + self.sensors[1].bias)
    }

    pub fn set_turbulence(&mut self, sigma: f64) {
        for s in &mut self.sensors {
            s.turbulence_sigma = sigma;
        }
    }

    pub fn paired_sample(&mut self, true_ppm: f64, dt: f64) -> PairedSample {
        let enabled = self.enabled();
        let raw = [
            self.sensors[0].sample(true_ppm, dt),
            self.sensors[1].sample(true_ppm, dt),
        ];
        let mut too_fast = false;
        for (held, r) in self.held.iter_mut().zip(raw) {
            match r {
                Reading::Ready(v) => *held = Some(v),
                Reading::NotReady(NotReady::TooFast) => too_fast = true,
                Reading::NotReady(_) => {}
            }
        }

        self.phase_elapsed += dt;
        // Tolerate rounding so that duty == dt toggles on every sample.
        while self.phase_elapsed >= self.duty_period * (1.0 - 1e-9) {
            self.phase_elapsed = (self.phase_elapsed - self.duty_period).max(0.0);
            for s in &mut self.sensors {
                s.enabled = !s.enabled;
            }
        }

        let reading = if too_fast {
            Reading::NotReady(NotReady::TooFast)
        } else if !self.sensors.iter().all(SensorState::is_warm) {
            Reading::NotReady(NotReady::WarmingUp)
        } else {
            match self.held {
                [Some(a), Some(b)] => Reading::Ready(0.5 * (a + b)),
                _ => Reading::NotReady(NotReady::AwaitingPair),
            }
        };
        PairedSample {
            reading,
            raw,
            enabled,
        }
    }
}
