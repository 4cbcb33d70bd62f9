//! Ground-truth odour field: an isotropic Gaussian puff that decays
//! exponentially, spreads linearly and is advected by a uniform wind.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid plume parameters: {0}")]
pub struct PlumeError(pub String);

/// Time-independent description of the field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlumeParams {
    /// mm
    pub source_position: Point3<f64>,
    /// Peak concentration at t = 0, ppm.
    pub amplitude: f64,
    /// mm
    pub sigma0: f64,
    /// mm/s
    pub spread_rate: f64,
    /// 1/s
    pub decay_lambda: f64,
    /// mm/s
    pub wind: Vector3<f64>,
}

impl Default for PlumeParams {
    fn default() -> Self {
        Self {
            source_position: Point3::new(350.0, 100.0, 150.0),
            amplitude: 1000.0,
            sigma0: 300.0,
            spread_rate: 0.0,
            decay_lambda: 0.005,
            wind: Vector3::zeros(),
        }
    }
}

impl PlumeParams {
    pub fn validate(&self) -> Result<(), PlumeError> {
        if !(self.amplitude > 0.0) {
            return Err(PlumeError("amplitude must be > 0".into()));
        }
        if !(self.sigma0 > 0.0) {
            return Err(PlumeError("sigma0 must be > 0".into()));
        }
        if !(self.decay_lambda >= 0.0) {
            return Err(PlumeError("decay_lambda must be >= 0".into()));
        }
        if !(self.spread_rate >= 0.0) {
            return Err(PlumeError("spread_rate must be >= 0".into()));
        }
        if !self.source_position.coords.iter().chain(self.wind.iter()).all(|v| v.is_finite()) {
            return Err(PlumeError("source_position and wind must be finite".into()));
        }
        Ok(())
    }

    /// Advected centre c(t).
    pub fn center(&self, t: f64) -> Point3<f64> {
        self.source_position + self.wind * t
    }

    /// σ(t)
    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma0 + self.spread_rate * t
    }

    /// Concentration at the centre, A·e^(−λt).
    pub fn peak(&self, t: f64) -> f64 {
        self.amplitude * (-self.decay_lambda * t).exp()
    }

    pub fn concentration(&self, point: &Point3<f64>, t: f64) -> f64 {
        let sigma = self.sigma(t);
        let d2 = (point - self.center(t)).norm_squared();
        self.peak(t) * (-d2 / (2.0 * sigma * sigma)).exp()
    }

    /// Distance from the centre at which the field equals `ppm`; zero at or
    /// above the peak, `None` for non-positive input.
    pub fn distance_for(&self, ppm: f64, t: f64) -> Option<f64> {
        if !(ppm > 0.0) {
            return None;
        }
        let ratio = self.peak(t) / ppm;
        Some(if ratio <= 1.0 {
            0.0
        } else {
            self.sigma(t) * (2.0 * ratio.ln()).sqrt()
        })
    }
}

/// A field frozen at elapsed time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlumeField {
    pub params: PlumeParams,
    pub t: f64,
}

impl PlumeField {
    pub fn new(params: PlumeParams) -> Result<Self, PlumeError> {
        params.validate()?;
        Ok(Self { params, t: 0.0 })
    }

    pub fn concentration_at(&self, point: &Point3<f64>) -> f64 {
        self.params.concentration(point, self.t)
    }

    pub fn center(&self) -> Point3<f64> {
        self.params.center(self.t)
    }

    pub fn step(&self, dt: f64) -> PlumeField {
        debug_assert!(dt > 0.0, "plume step needs dt > 0");
        PlumeField {
            params: self.params,
            t: self.t + dt,
        }
    }
}
