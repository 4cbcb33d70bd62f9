//! Extended Kalman filter over [source x, y, z (mm), sensor bias (ppm)].
//! The source is static; the arm pose enters only through the measurement
//! models, with the tip taken from forward kinematics on the encoders.

use nalgebra::{Matrix3, Matrix4, Point3, RowVector4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::DofMode;
use crate::calibration::UncertaintyBudget;
use crate::plume::PlumeParams;
use crate::sensor::SensorSpec;

/// 99th percentile of χ² with one degree of freedom.
pub const CHI2_GATE_99: f64 = 6.634_896_601_021_214;

/// Below this tip-to-estimate distance the range Jacobian is undefined, mm.
pub const MIN_GEOMETRY_DISTANCE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EkfError {
    #[error("budget has no Type A entry for {0} or no Type B entry")]
    IncompleteBudget(DofMode),
    #[error("tip is {0:.3} mm from the estimate; range Jacobian undefined")]
    SingularGeometry(f64),
    #[error("measured range must be positive, got {0}")]
    NonPositiveRange(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
}

/// Initial belief about the source and the bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub position: Point3<f64>,
    /// mm²
    pub position_covariance: Matrix3<f64>,
    /// ppm
    pub bias: f64,
    /// ppm²
    pub bias_variance: f64,
}

impl Prior {
    pub fn isotropic(position: Point3<f64>, std_mm: f64, bias_std: f64) -> Self {
        Self {
            position,
            position_covariance: Matrix3::identity() * std_mm * std_mm,
            bias: 0.0,
            bias_variance: bias_std * bias_std,
        }
    }
}

/// Multipliers applied on top of the budget-derived noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseTuning {
    pub q_scale: f64,
    pub r_scale: f64,
}

impl Default for NoiseTuning {
    fn default() -> Self {
        Self {
            q_scale: 1.0,
            r_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EkfState {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
    /// Per-second process noise.
    pub q: Matrix4<f64>,
    /// Concentration-measurement variance, ppm².
    pub r: f64,
    pub t: f64,
}

/// What an update did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateInfo {
    pub innovation: f64,
    pub innovation_variance: f64,
    /// Normalized innovation squared.
    pub nis: f64,
    pub gated: bool,
}

fn initial(prior: &Prior, q: Matrix4<f64>, r: f64, t: f64) -> EkfState {
    let mut p = Matrix4::zeros();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(&prior.position_covariance);
    p[(3, 3)] = prior.bias_variance;
    EkfState {
        x: Vector4::new(prior.position.x, prior.position.y, prior.position.z, prior.bias),
        p,
        q,
        r,
        t,
    }
}

fn diag_q(position: f64, bias: f64) -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(position, position, position, bias))
}

/// Variance per second of the pair-averaged bias random walk.
fn pair_bias_q(spec: &SensorSpec) -> f64 {
    0.5 * spec.drift_walk_std * spec.drift_walk_std
}

impl EkfState {
    /// R = u_a², Q_position = u_b² per second, Q_bias from the drift walk.
    pub fn init_from_budget(
        budget: &UncertaintyBudget,
        mode: DofMode,
        spec: &SensorSpec,
        prior: &Prior,
        tuning: &NoiseTuning,
        t: f64,
    ) -> Result<Self, EkfError> {
        let u_a = budget.u_a(mode).ok_or(EkfError::IncompleteBudget(mode))?;
        let u_b = budget.u_b().ok_or(EkfError::IncompleteBudget(mode))?;
        let q = diag_q(u_b * u_b, pair_bias_q(spec)) * tuning.q_scale;
        Ok(initial(prior, q, u_a * u_a * tuning.r_scale, t))
    }

    /// Uncalibrated filter: R from the catalog noise, Q_position supplied
    /// at workspace scale.
    pub fn cold_start(spec: &SensorSpec, prior: &Prior, q_position: f64, tuning: &NoiseTuning, t: f64) -> Self {
        let q = diag_q(q_position, pair_bias_q(spec)) * tuning.q_scale;
        initial(prior, q, spec.noise_std * spec.noise_std * tuning.r_scale, t)
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::new(self.x[0], self.x[1], self.x[2])
    }

    pub fn bias(&self) -> f64 {
        self.x[3]
    }

    /// P ← P + Q·dt
    pub fn predict(&self, dt: f64) -> Result<EkfState, EkfError> {
        if !(dt > 0.0) {
            return Err(EkfError::NonPositiveStep(dt));
        }
        let mut next = *self;
        next.p += self.q * dt;
        next.t += dt;
        Ok(next)
    }

    /// Predicts up to `t` when it is ahead of the filter clock.
    pub fn predict_to(&self, t: f64) -> EkfState {
        match self.predict(t - self.t) {
            Ok(s) => s,
            Err(_) => *self,
        }
    }

    fn update(&self, innovation: f64, h: RowVector4<f64>, r: f64) -> (EkfState, UpdateInfo) {
        let ph = self.p * h.transpose();
        let s = (h * ph)[(0, 0)] + r;
        let nis = if s > 0.0 { innovation * innovation / s } else { f64::INFINITY };
        let gated = !(nis <= CHI2_GATE_99) && !(s == 0.0 && innovation == 0.0);
        let info = UpdateInfo {
            innovation,
            innovation_variance: s,
            nis,
            gated,
        };
        if gated || s <= 0.0 {
            return (*self, info);
        }
        let k = ph / s;
        let ikh = Matrix4::identity() - k * h;
        let mut next = *self;
        next.x += k * innovation;
        let p = ikh * self.p * ikh.transpose() + k * k.transpose() * r;
        next.p = 0.5 * (p + p.transpose());
        (next, info)
    }

    /// Range from the tip to the source, with its variance in mm².
    pub fn update_range(
        &self,
        measured_range: f64,
        tip: &Point3<f64>,
        range_variance: f64,
    ) -> Result<(EkfState, UpdateInfo), EkfError> {
        if !(measured_range > 0.0) {
            return Err(EkfError::NonPositiveRange(measured_range));
        }
        let d = self.position() - tip;
        let dist = d.norm();
        if dist < MIN_GEOMETRY_DISTANCE {
            return Err(EkfError::SingularGeometry(dist));
        }
        let u = d / dist;
        let h = RowVector4::new(u.x, u.y, u.z, 0.0);
        Ok(self.update(measured_range - dist, h, range_variance))
    }

    /// Predicted reading at `tip` and its gradient with respect to the state.
    pub fn concentration_model(&self, tip: &Point3<f64>, params: &PlumeParams) -> (f64, RowVector4<f64>) {
        let sigma = params.sigma(self.t);
        let d: Vector3<f64> = tip - (self.position() + params.wind * self.t);
        let g = params.peak(self.t) * (-d.norm_squared() / (2.0 * sigma * sigma)).exp();
        let grad = d * (g / (sigma * sigma));
        (g + self.x[3], RowVector4::new(grad.x, grad.y, grad.z, 1.0))
    }

    /// Raw reading against a Gaussian field released at the estimate, plus bias.
    pub fn update_concentration(
        &self,
        reading: f64,
        tip: &Point3<f64>,
        params: &PlumeParams,
    ) -> Result<(EkfState, UpdateInfo), EkfError> {
        let dist = (self.position() - tip).norm();
        if dist < MIN_GEOMETRY_DISTANCE {
            return Err(EkfError::SingularGeometry(dist));
        }
        let (predicted, h) = self.concentration_model(tip, params);
        Ok(self.update(reading - predicted, h, self.r))
    }

    /// Smallest eigenvalue of P.
    pub fn min_eigenvalue(&self) -> f64 {
        self.p.symmetric_eigenvalues().min()
    }

    /// PSD up to −1e-9·trace.
    pub fn covariance_is_psd(&self) -> bool {
        self.min_eigenvalue() >= -1e-9 * self.p.trace().abs()
    }
}
