//! Range-sphere belief maps: olfactory readings become RSSI-style ranges,
//! each range is a sphere around the tip, and the spheres' common point is
//! the source estimate.

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plume::PlumeParams;
use crate::world::{Window, World};

/// Floor on a radius variance, mm², so exact readings keep finite weights.
pub const MIN_RADIUS_VARIANCE: f64 = 1e-6;
/// Smallest radius a reading can map to, mm.
pub const MIN_RADIUS: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("sphere centres do not span three dimensions")]
    DegenerateGeometry,
    #[error("vertex extraction did not converge in {0} iterations")]
    NotConverged(usize),
    #[error("need at least 4 spheres, have {0}")]
    TooFewSpheres(usize),
    #[error("move budget of {0} exhausted before the vertex converged")]
    BudgetExhausted(usize),
    #[error("sensor produced no usable reading")]
    NoReading,
    #[error("invalid path-loss model: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSphere {
    pub center: Point3<f64>,
    /// mm
    pub radius: f64,
    /// 1 / variance of the radius, 1/mm².
    pub weight: f64,
}

/// Log-distance path-loss law mapping RSSI to range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLossModel {
    /// dB at `reference_distance`.
    pub reference_rssi: f64,
    /// mm
    pub reference_distance: f64,
    pub path_loss_exponent: f64,
    /// Readings below this are clamped before the log, ppm.
    pub concentration_floor: f64,
    /// Concentration that maps to 0 dB, ppm.
    pub reference_ppm: f64,
}

impl Default for PathLossModel {
    fn default() -> Self {
        Self {
            reference_rssi: 0.0,
            reference_distance: 100.0,
            path_loss_exponent: 2.0,
            concentration_floor: 1e-3,
            reference_ppm: 1.0,
        }
    }
}

impl PathLossModel {
    pub fn validate(&self) -> Result<(), BeliefError> {
        if !(self.path_loss_exponent > 0.0) {
            return Err(BeliefError::InvalidModel("path_loss_exponent must be > 0".into()));
        }
        if !(self.reference_distance > 0.0) {
            return Err(BeliefError::InvalidModel("reference_distance must be > 0".into()));
        }
        if !(self.concentration_floor > 0.0 && self.reference_ppm > 0.0) {
            return Err(BeliefError::InvalidModel(
                "concentration_floor and reference_ppm must be > 0".into(),
            ));
        }
        Ok(())
    }
}

pub fn response_to_rssi(reading: f64, model: &PathLossModel) -> f64 {
    10.0 * (reading.max(model.concentration_floor) / model.reference_ppm).log10()
}

pub fn rssi_to_range(rssi: f64, model: &PathLossModel) -> f64 {
    model.reference_distance * 10f64.powf((model.reference_rssi - rssi) / (10.0 * model.path_loss_exponent))
}

pub fn range_to_rssi(range: f64, model: &PathLossModel) -> f64 {
    model.reference_rssi - 10.0 * model.path_loss_exponent * (range / model.reference_distance).log10()
}

/// Least-squares fit of the log-distance law to a Gaussian field at time
/// `t`, over `samples` radii spaced evenly in `[r_min, r_max]`.
pub fn fit_path_loss(
    params: &PlumeParams,
    t: f64,
    r_min: f64,
    r_max: f64,
    samples: usize,
    reference_distance: f64,
) -> PathLossModel {
    assert!(samples >= 2 && r_min > 0.0 && r_max > r_min);
    let base = PathLossModel {
        reference_distance,
        ..PathLossModel::default()
    };
    let center = params.center(t);
    // rssi = a − n·x with x = 10·log10(d/d0)
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..samples {
        let d = r_min + (r_max - r_min) * i as f64 / (samples - 1) as f64;
        let c = params.concentration(&(center + Vector3::new(d, 0.0, 0.0)), t);
        let x = 10.0 * (d / reference_distance).log10();
        let y = response_to_rssi(c, &base);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let n = samples as f64;
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    PathLossModel {
        reference_rssi: intercept,
        path_loss_exponent: (-slope).max(1e-6),
        ..base
    }
}

/// How a concentration reading becomes a range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RangeModel {
    PathLoss(PathLossModel),
    /// Exact inverse of a known Gaussian field at the reading's timestamp.
    PlumeInverse { params: PlumeParams, concentration_floor: f64 },
}

impl RangeModel {
    pub fn plume_inverse(params: PlumeParams) -> Self {
        RangeModel::PlumeInverse {
            params,
            concentration_floor: PathLossModel::default().concentration_floor,
        }
    }

    /// Range and its derivative with respect to the reading (mm/ppm).
    pub fn range(&self, reading: f64, t: f64) -> (f64, f64) {
        match self {
            RangeModel::PathLoss(m) => {
                let c = reading.max(m.concentration_floor);
                let r = rssi_to_range(response_to_rssi(c, m), m).max(MIN_RADIUS);
                let slope = if reading > m.concentration_floor {
                    -r / (m.path_loss_exponent * c)
                } else {
                    0.0
                };
                (r, slope)
            }
            RangeModel::PlumeInverse {
                params,
                concentration_floor,
            } => {
                let c = reading.max(*concentration_floor);
                let r = params.distance_for(c, t).unwrap_or(0.0).max(MIN_RADIUS);
                let sigma = params.sigma(t);
                let slope = if reading > *concentration_floor {
                    -sigma * sigma / (r * c)
                } else {
                    0.0
                };
                (r, slope)
            }
        }
    }

    /// Sphere for a reading taken at `center`, propagating `reading_variance`
    /// (ppm²) through the conversion.
    pub fn sphere(&self, center: Point3<f64>, reading: f64, reading_variance: f64, t: f64) -> RangeSphere {
        let (radius, slope) = self.range(reading, t);
        let variance = (slope * slope * reading_variance.max(0.0)).max(MIN_RADIUS_VARIANCE);
        RangeSphere {
            center,
            radius,
            weight: 1.0 / variance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeModelKind {
    /// Log-distance law fitted to the field when localization starts.
    PathLoss,
    PlumeInverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeModelConfig {
    pub kind: RangeModelKind,
    /// Annulus over which the path-loss law is fitted, mm.
    pub fit_r_min: f64,
    pub fit_r_max: f64,
    pub fit_samples: usize,
    pub reference_distance: f64,
}

impl Default for RangeModelConfig {
    fn default() -> Self {
        Self {
            kind: RangeModelKind::PlumeInverse,
            fit_r_min: 100.0,
            fit_r_max: 500.0,
            fit_samples: 64,
            reference_distance: 100.0,
        }
    }
}

impl RangeModelConfig {
    pub fn validate(&self) -> Result<(), BeliefError> {
        if !(self.fit_r_min > 0.0 && self.fit_r_max > self.fit_r_min) {
            return Err(BeliefError::InvalidModel("need 0 < fit_r_min < fit_r_max".into()));
        }
        if self.fit_samples < 2 {
            return Err(BeliefError::InvalidModel("fit_samples must be >= 2".into()));
        }
        if !(self.reference_distance > 0.0) {
            return Err(BeliefError::InvalidModel("reference_distance must be > 0".into()));
        }
        Ok(())
    }

    /// Model for a field whose parameters are known, fitted at time `t`.
    pub fn build(&self, params: &PlumeParams, t: f64) -> RangeModel {
        match self.kind {
            RangeModelKind::PathLoss => RangeModel::PathLoss(fit_path_loss(
                params,
                t,
                self.fit_r_min,
                self.fit_r_max,
                self.fit_samples,
                self.reference_distance,
            )),
            RangeModelKind::PlumeInverse => RangeModel::plume_inverse(*params),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// mm
    pub step_tolerance: f64,
    /// RMS miss distance treated as an exact fit, mm.
    pub residual_tolerance: f64,
    /// Relative singular-value floor for the centre spread.
    pub degeneracy_eps: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-6,
            residual_tolerance: 1e-9,
            degeneracy_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexFit {
    pub position: Point3<f64>,
    /// Weighted RMS of |‖p − cᵢ‖ − rᵢ|, mm.
    pub residual: f64,
    /// Position covariance, mm², scaled up by the reduced χ² when it exceeds 1.
    pub covariance: Matrix3<f64>,
    pub iterations: usize,
}

impl VertexFit {
    /// √trace of the covariance, mm.
    pub fn precision(&self) -> f64 {
        self.covariance.trace().max(0.0).sqrt()
    }
}

fn check_geometry(spheres: &[RangeSphere], eps: f64) -> Result<(), BeliefError> {
    let n = spheres.len() as f64;
    let mean = spheres.iter().map(|s| s.center.coords).sum::<Vector3<f64>>() / n;
    let gram = spheres
        .iter()
        .map(|s| {
            let d = s.center.coords - mean;
            d * d.transpose()
        })
        .sum::<Matrix3<f64>>();
    let ev = gram.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if !(lo > eps * eps * hi.max(1.0)) {
        return Err(BeliefError::DegenerateGeometry);
    }
    Ok(())
}

/// Closed-form start: subtract the first sphere equation from the others and
/// solve the resulting linear system in the least-squares sense.
fn linear_guess(spheres: &[RangeSphere]) -> Option<Point3<f64>> {
    let c0 = spheres[0].center.coords;
    let r0 = spheres[0].radius;
    let rows = spheres.len() - 1;
    let mut a = DMatrix::zeros(rows, 3);
    let mut b = DVector::zeros(rows);
    for (i, s) in spheres[1..].iter().enumerate() {
        let ci = s.center.coords;
        let d = 2.0 * (ci - c0);
        a.set_row(i, &d.transpose());
        b[i] = ci.norm_squared() - c0.norm_squared() - s.radius * s.radius + r0 * r0;
    }
    let x = a.svd(true, true).solve(&b, 1e-12).ok()?;
    let p = Point3::new(x[0], x[1], x[2]);
    p.coords.iter().all(|v| v.is_finite()).then_some(p)
}

fn cost(spheres: &[RangeSphere], p: &Point3<f64>) -> f64 {
    spheres
        .iter()
        .map(|s| s.weight * ((p - s.center).norm() - s.radius).powi(2))
        .sum()
}

/// Weighted RMS of the surface misses, √(Σ wᵢeᵢ² / Σ wᵢ).
fn rms_miss(spheres: &[RangeSphere], p: &Point3<f64>) -> f64 {
    let (ss, w) = spheres.iter().fold((0.0, 0.0), |(ss, w), s| {
        (ss + s.weight * ((p - s.center).norm() - s.radius).powi(2), w + s.weight)
    });
    (ss / w).sqrt()
}

fn normal_equations(spheres: &[RangeSphere], p: &Point3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for s in spheres {
        let d = p - s.center;
        let dist = d.norm();
        if dist == 0.0 {
            continue;
        }
        let j = d / dist;
        let r = dist - s.radius;
        jtj += s.weight * j * j.transpose();
        jtr += s.weight * r * j;
    }
    (jtj, jtr)
}

/// Weighted nonlinear least squares for the point closest to every sphere
/// surface, by damped Gauss-Newton from a linearized start.
pub fn extract_vertex(spheres: &[RangeSphere], opts: &SolverOptions) -> Result<VertexFit, BeliefError> {
    if spheres.len() < 4 {
        return Err(BeliefError::TooFewSpheres(spheres.len()));
    }
    check_geometry(spheres, opts.degeneracy_eps)?;
    let mut p = linear_guess(spheres).ok_or(BeliefError::DegenerateGeometry)?;
    let mut current = cost(spheres, &p);
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        if rms_miss(spheres, &p) < opts.residual_tolerance {
            converged = true;
            break;
        }
        let (jtj, jtr) = normal_equations(spheres, &p);
        let mut accepted = None;
        while mu < 1e12 {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += mu * jtj[(i, i)].max(1e-300);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                mu *= 10.0;
                continue;
            };
            let candidate = p + step;
            let c = cost(spheres, &candidate);
            if c <= current {
                accepted = Some((candidate, c, step.norm()));
                mu = (mu * 0.1).max(1e-12);
                break;
            }
            mu *= 10.0;
        }
        match accepted {
            Some((candidate, c, step)) => {
                p = candidate;
                current = c;
                if step < opts.step_tolerance {
                    converged = true;
                    break;
                }
            }
            // No descent direction left at machine precision.
            None => {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(BeliefError::NotConverged(iterations));
    }
    // Undamped polish so the answer does not depend on where damping left off.
    for _ in 0..10 {
        let (jtj, jtr) = normal_equations(spheres, &p);
        let Some(step) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else {
            break;
        };
        let candidate = p + step;
        let c = cost(spheres, &candidate);
        // Near the optimum the cost is flat below rounding; trust small steps.
        if !(c <= current || step.norm() < 1e-3) {
            break;
        }
        p = candidate;
        current = c.min(current);
        if step.norm() < 1e-3 * opts.step_tolerance {
            break;
        }
    }
    let (jtj, _) = normal_equations(spheres, &p);
    let n = spheres.len();
    let scale = if n > 3 { (current / (n - 3) as f64).max(1.0) } else { 1.0 };
    let covariance = jtj.try_inverse().ok_or(BeliefError::DegenerateGeometry)? * scale;
    Ok(VertexFit {
        position: p,
        residual: rms_miss(spheres, &p),
        covariance,
        iterations,
    })
}

fn fibonacci_sphere(center: &Point3<f64>, radius: f64, count: usize) -> Vec<Point3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let rho = (1.0 - z * z).sqrt();
            let th = golden * i as f64;
            center + radius * Vector3::new(rho * th.cos(), rho * th.sin(), z)
        })
        .collect()
}

fn orthonormal_pair(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = n.cross(&helper).normalize();
    (u, n.cross(&u))
}

/// Circle where two spheres meet, as (centre, normal, radius); tangent or
/// disjoint spheres collapse to the closest point between them.
fn intersection_circle(a: &RangeSphere, b: &RangeSphere) -> Option<(Point3<f64>, Vector3<f64>, f64)> {
    let axis = b.center - a.center;
    let d = axis.norm();
    if d == 0.0 {
        return None;
    }
    let n = axis / d;
    let x = (d * d + a.radius * a.radius - b.radius * b.radius) / (2.0 * d);
    let h2 = a.radius * a.radius - x * x;
    Some((a.center + n * x, n, h2.max(0.0).sqrt()))
}

pub const SURFACE_POINTS: usize = 64;
pub const CIRCLE_POINTS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefMap {
    pub spheres: Vec<RangeSphere>,
    /// Discrete samples of the current constraint set.
    pub sigma_points: Vec<Point3<f64>>,
    pub vertex: Option<Point3<f64>>,
    /// RMS sphere-surface miss of the latest fit, mm.
    pub residual: f64,
    /// Largest residual for which a fit is accepted as the vertex, mm.
    pub residual_threshold: f64,
    /// Radius of the reachable workspace, used to break two-point ties, mm.
    pub workspace_radius: f64,
    pub solver: SolverOptions,
    /// Latest least-squares fit, accepted or not.
    pub last_fit: Option<VertexFit>,
}

impl BeliefMap {
    pub fn new(residual_threshold: f64, workspace_radius: f64) -> Self {
        Self {
            spheres: Vec::new(),
            sigma_points: Vec::new(),
            vertex: None,
            residual: f64::INFINITY,
            residual_threshold,
            workspace_radius,
            solver: SolverOptions::default(),
            last_fit: None,
        }
    }

    pub fn add_sphere(&mut self, sphere: RangeSphere) -> Result<(), BeliefError> {
        assert!(sphere.center.coords.iter().all(|v| v.is_finite()), "sphere centre must be finite");
        self.spheres.push(sphere);
        if self.spheres.len() < 4 {
            self.sigma_points = self.constraint_samples();
            return Ok(());
        }
        let result = extract_vertex(&self.spheres, &self.solver);
        match result {
            Ok(fit) => {
                self.residual = fit.residual;
                self.vertex = (fit.residual <= self.residual_threshold).then_some(fit.position);
                self.last_fit = Some(fit);
                self.sigma_points = vec![fit.position];
                Ok(())
            }
            Err(e) => {
                self.vertex = None;
                self.last_fit = None;
                self.sigma_points = self.constraint_samples();
                match e {
                    BeliefError::NotConverged(_) => Ok(()),
                    other => Err(other),
                }
            }
        }
    }

    /// Converts a reading to a sphere around `center` and adds it. The
    /// sphere is kept even when the geometry error is returned.
    pub fn add_observation(
        &mut self,
        center: Point3<f64>,
        reading: f64,
        model: &RangeModel,
        reading_variance: f64,
        t: f64,
    ) -> Result<(), BeliefError> {
        self.add_sphere(model.sphere(center, reading, reading_variance, t))
    }

    fn in_workspace(&self, p: &Point3<f64>) -> bool {
        p.coords.norm() <= self.workspace_radius
    }

    fn constraint_samples(&self) -> Vec<Point3<f64>> {
        match self.spheres.as_slice() {
            [] => Vec::new(),
            [s] => fibonacci_sphere(&s.center, s.radius, SURFACE_POINTS),
            [a, b] => match intersection_circle(a, b) {
                Some((c, n, rho)) if rho > 0.0 => {
                    let (u, v) = orthonormal_pair(&n);
                    (0..CIRCLE_POINTS)
                        .map(|i| {
                            let th = 2.0 * std::f64::consts::PI * i as f64 / CIRCLE_POINTS as f64;
                            c + rho * (th.cos() * u + th.sin() * v)
                        })
                        .collect()
                }
                Some((c, _, _)) => vec![c],
                None => vec![a.center],
            },
            [a, b, c, ..] => self.three_sphere_points(a, b, c),
        }
    }

    fn three_sphere_points(&self, a: &RangeSphere, b: &RangeSphere, c: &RangeSphere) -> Vec<Point3<f64>> {
        let ex = b.center - a.center;
        let d = ex.norm();
        if d == 0.0 {
            return vec![a.center];
        }
        let ex = ex / d;
        let ac = c.center - a.center;
        let i = ex.dot(&ac);
        let ey = ac - i * ex;
        let j = ey.norm();
        if j == 0.0 {
            return vec![a.center];
        }
        let ey = ey / j;
        let ez = ex.cross(&ey);
        let x = (a.radius.powi(2) - b.radius.powi(2) + d * d) / (2.0 * d);
        let y = (a.radius.powi(2) - c.radius.powi(2) + i * i + j * j) / (2.0 * j) - i * x / j;
        let z2 = a.radius.powi(2) - x * x - y * y;
        let base = a.center + x * ex + y * ey;
        if z2 <= 0.0 {
            return vec![base];
        }
        let z = z2.sqrt();
        let pair = [base + z * ez, base - z * ez];
        let inside: Vec<_> = pair.iter().copied().filter(|p| self.in_workspace(p)).collect();
        if inside.len() == 1 { inside } else { pair.to_vec() }
    }
}

/// Vertices of a regular tetrahedron with circumradius `radius`, rotated.
pub fn tetrahedron(radius: f64, rotation: &Rotation3<f64>) -> [Vector3<f64>; 4] {
    let s = radius / 3f64.sqrt();
    [
        Vector3::new(1.0, 1.0, 1.0),
        Vector3::new(1.0, -1.0, -1.0),
        Vector3::new(-1.0, 1.0, -1.0),
        Vector3::new(-1.0, -1.0, 1.0),
    ]
    .map(|v| rotation * (v * s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeOptions {
    /// Maximum inverse-kinematic moves.
    pub max_moves: usize,
    /// Edge of the first probe tetrahedron, mm.
    pub probe_edge: f64,
    /// Distance from the estimate at which later probes are placed, mm.
    pub standoff: f64,
    /// Samples discarded after each move, s.
    pub settle_time: f64,
    /// Readings averaged per observation.
    pub window: usize,
    /// Observations required before a vertex is accepted.
    pub min_observations: usize,
    /// Required √trace of the vertex covariance, mm.
    pub precision_target: f64,
    /// Largest RMS miss accepted for a vertex, mm.
    pub residual_threshold: f64,
    /// A vertex is accepted early once a window's mean falls below this
    /// multiple of its standard error.
    pub min_snr: f64,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        Self {
            max_moves: 500,
            probe_edge: 120.0,
            standoff: 280.0,
            settle_time: 6.0,
            window: 11,
            min_observations: 5,
            precision_target: 6.0,
            residual_threshold: 50.0,
            min_snr: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub t: f64,
    /// Tip position from the encoders, mm.
    pub center: Point3<f64>,
    pub true_tip: Point3<f64>,
    pub reading: f64,
    pub radius: f64,
    pub weight: f64,
    /// Residual after adding this sphere (NaN before a fit exists), mm.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefResult {
    /// Always present when returned by [`localize`].
    pub vertex: Option<Point3<f64>>,
    pub residual: f64,
    /// Moves consumed.
    pub m: usize,
    pub trajectory: Vec<ProbeRecord>,
    pub map: BeliefMap,
}

impl BeliefResult {
    pub fn measurements(&self) -> usize {
        self.trajectory.len()
    }
}

fn converged(map: &BeliefMap, opts: &LocalizeOptions, snr: f64) -> bool {
    map.vertex.is_some()
        && map.spheres.len() >= opts.min_observations
        && (snr < opts.min_snr || map.last_fit.is_some_and(|f| f.precision() <= opts.precision_target))
}

fn window_snr(window: &Window) -> f64 {
    let se = window.mean_variance().sqrt();
    if se > 0.0 {
        window.mean / se
    } else {
        f64::INFINITY
    }
}

fn observe(
    world: &mut World,
    map: &mut BeliefMap,
    model: &RangeModel,
    opts: &LocalizeOptions,
) -> Result<(ProbeRecord, f64), BeliefError> {
    let window = world.dwell(opts.settle_time, opts.window).ok_or(BeliefError::NoReading)?;
    let center = world.reported_tip();
    let sphere = model.sphere(center, window.mean, window.mean_variance(), window.t);
    match map.add_sphere(sphere) {
        Ok(()) | Err(BeliefError::DegenerateGeometry) => {}
        Err(e) => return Err(e),
    }
    log::debug!(
        "probe t={:.1} reading={:.2} radius={:.1} true={:.1} spheres={} fit={:?}",
        window.t,
        window.mean,
        sphere.radius,
        (world.true_tip() - world.plume.center()).norm(),
        map.spheres.len(),
        map.last_fit.map(|f| (f.position, f.residual, f.precision()))
    );
    let record = ProbeRecord {
        t: window.t,
        center,
        true_tip: world.true_tip(),
        reading: window.mean,
        radius: sphere.radius,
        weight: sphere.weight,
        residual: if map.last_fit.is_some() { map.residual } else { f64::NAN },
    };
    Ok((record, window_snr(&window)))
}

/// Probes around the current best guess until the vertex converges.
pub fn localize(world: &mut World, model: &RangeModel, opts: &LocalizeOptions) -> Result<BeliefResult, BeliefError> {
    let mut map = BeliefMap::new(opts.residual_threshold, world.arm_config.reach());
    let (first, mut snr) = observe(world, &mut map, model, opts)?;
    let mut trajectory = vec![first];
    let start = world.reported_tip();
    let mut moves = 0;
    let done = |map: BeliefMap, trajectory: Vec<ProbeRecord>, moves: usize| BeliefResult {
        vertex: map.vertex,
        residual: map.residual,
        m: moves,
        trajectory,
        map,
    };
    for offset in tetrahedron(opts.probe_edge * (3.0f64 / 8.0).sqrt(), &Rotation3::identity()) {
        if moves >= opts.max_moves {
            return Err(BeliefError::BudgetExhausted(opts.max_moves));
        }
        if [1.0, 0.75, 0.5].iter().any(|f| world.move_tip_to(&(start + offset * *f))) {
            moves += 1;
            let (record, s) = observe(world, &mut map, model, opts)?;
            trajectory.push(record);
            snr = s;
        }
    }
    let mut probe = 0usize;
    let mut misses = 0usize;
    while !converged(&map, opts, snr) {
        if moves >= opts.max_moves || misses > 4 * opts.max_moves {
            return Err(BeliefError::BudgetExhausted(opts.max_moves));
        }
        let anchor = map.last_fit.map(|f| f.position).unwrap_or(start);
        let target = anchor + spiral_direction(probe, SPIRAL_PASS) * opts.standoff;
        probe += 1;
        if !world.arc_to(&anchor, &target) {
            misses += 1;
            continue;
        }
        moves += 1;
        let (record, s) = observe(world, &mut map, model, opts)?;
        trajectory.push(record);
        snr = s;
    }
    Ok(done(map, trajectory, moves))
}

/// Probe directions per pass of [`spiral_direction`].
pub const SPIRAL_PASS: usize = 24;

/// Unit directions along a pole-to-pole spiral of `per_pass` points.
/// Consecutive directions are neighbours; each pass reverses and twists.
pub fn spiral_direction(i: usize, per_pass: usize) -> Vector3<f64> {
    let n = per_pass.max(2);
    let pass = i / n;
    let k = i % n;
    let h = |k: usize| 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
    let mut phi = pass as f64 * std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for step in 1..=k {
        phi += 3.6 / (n as f64 * (1.0 - h(step).powi(2))).sqrt();
    }
    let z = if pass % 2 == 0 { h(k) } else { -h(k) };
    let rho = (1.0 - z * z).sqrt();
    Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn exact(truth: Point3<f64>, centers: &[Point3<f64>]) -> Vec<RangeSphere> {
        centers
            .iter()
            .map(|c| RangeSphere {
                center: *c,
                radius: (truth - c).norm(),
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn rssi_examples() {
        let m = PathLossModel {
            reference_ppm: 50.0,
            ..PathLossModel::default()
        };
        assert_eq!(response_to_rssi(50.0, &m), 0.0);
        assert_relative_eq!(response_to_rssi(500.0, &m), 10.0, epsilon = 1e-12);
        assert!(response_to_rssi(0.0, &m).is_finite());
        assert_eq!(rssi_to_range(m.reference_rssi, &m), m.reference_distance);
        let decade = m.reference_rssi - 10.0 * m.path_loss_exponent;
        assert_relative_eq!(rssi_to_range(decade, &m), 10.0 * m.reference_distance, max_relative = 1e-14);
    }

    #[test]
    fn symmetric_cross_gives_origin() {
        let centers = [
            Point3::new(500.0, 0.0, 0.0),
            Point3::new(-500.0, 0.0, 0.0),
            Point3::new(0.0, 500.0, 0.0),
            Point3::new(0.0, -500.0, 0.0),
            Point3::new(0.0, 0.0, 500.0),
        ];
        let spheres: Vec<_> = centers
            .iter()
            .map(|c| RangeSphere {
                center: *c,
                radius: 500.0,
                weight: 1.0,
            })
            .collect();
        let fit = extract_vertex(&spheres, &SolverOptions::default()).unwrap();
        assert!(fit.position.coords.norm() < 1e-9);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn coplanar_centres_are_degenerate() {
        let centers = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(100.0, 0.0, 0.0),
            Point3::new(0.0, 100.0, 0.0),
            Point3::new(100.0, 100.0, 0.0),
        ];
        let spheres = exact(Point3::new(10.0, 20.0, 30.0), &centers);
        assert_eq!(
            extract_vertex(&spheres, &SolverOptions::default()).unwrap_err(),
            BeliefError::DegenerateGeometry
        );
        assert_eq!(
            extract_vertex(&spheres[..3], &SolverOptions::default()).unwrap_err(),
            BeliefError::TooFewSpheres(3)
        );
    }

    #[test]
    fn sigma_points_follow_constraints() {
        let truth = Point3::new(30.0, -20.0, 40.0);
        let centers = [
            Point3::new(200.0, 0.0, 0.0),
            Point3::new(0.0, 200.0, 0.0),
            Point3::new(0.0, 0.0, 200.0),
            Point3::new(-150.0, -150.0, -50.0),
        ];
        let spheres = exact(truth, &centers);
        let mut map = BeliefMap::new(1.0, 1e6);
        map.add_sphere(spheres[0]).unwrap();
        assert_eq!(map.sigma_points.len(), SURFACE_POINTS);
        map.add_sphere(spheres[1]).unwrap();
        assert_eq!(map.sigma_points.len(), CIRCLE_POINTS);
        for p in &map.sigma_points {
            for s in &spheres[..2] {
                assert!(((p - s.center).norm() - s.radius).abs() < 1e-9);
            }
        }
        map.add_sphere(spheres[2]).unwrap();
        assert_eq!(map.sigma_points.len(), 2);
        assert!(map.sigma_points.iter().any(|p| (p - truth).norm() < 1e-6));
        map.add_sphere(spheres[3]).unwrap();
        assert_eq!(map.sigma_points.len(), 1);
        assert!((map.vertex.unwrap() - truth).norm() < 1e-6);
    }

    #[test]
    fn workspace_breaks_two_point_tie() {
        let truth = Point3::new(0.0, 0.0, 20.0);
        let centers = [
            Point3::new(100.0, 0.0, -100.0),
            Point3::new(0.0, 100.0, -100.0),
            Point3::new(-100.0, -100.0, -100.0),
        ];
        let mut wide = BeliefMap::new(1.0, 1e6);
        let mut tight = BeliefMap::new(1.0, 100.0);
        for s in exact(truth, &centers) {
            wide.add_sphere(s).unwrap();
            tight.add_sphere(s).unwrap();
        }
        assert_eq!(wide.sigma_points.len(), 2);
        assert_eq!(tight.sigma_points.len(), 1);
        assert!((tight.sigma_points[0] - truth).norm() < 1e-9);
    }

    #[test]
    fn fitted_path_loss_decreases_with_distance() {
        let params = PlumeParams::default();
        let m = fit_path_loss(&params, 0.0, 100.0, 600.0, 50, 100.0);
        assert!(m.path_loss_exponent > 0.0);
        let model = RangeModel::PathLoss(m);
        let c = |d: f64| params.concentration(&(params.source_position + Vector3::new(d, 0.0, 0.0)), 0.0);
        let (near, _) = model.range(c(150.0), 0.0);
        let (far, _) = model.range(c(500.0), 0.0);
        assert!(near < far);
    }

    #[test]
    fn range_slope_matches_finite_difference() {
        let params = PlumeParams::default();
        let models = [
            RangeModel::plume_inverse(params),
            RangeModel::PathLoss(fit_path_loss(&params, 0.0, 100.0, 600.0, 50, 100.0)),
        ];
        for model in models {
            for c in [50.0, 300.0, 800.0] {
                let (_, slope) = model.range(c, 3.0);
                let h = 1e-4 * c;
                let fd = (model.range(c + h, 3.0).0 - model.range(c - h, 3.0).0) / (2.0 * h);
                assert_relative_eq!(slope, fd, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn tetrahedron_is_regular() {
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.3);
        let v = tetrahedron(73.484692283495, &rot);
        for i in 0..4 {
            assert_relative_eq!(v[i].norm(), 73.484692283495, max_relative = 1e-12);
            for j in i + 1..4 {
                assert_relative_eq!((v[i] - v[j]).norm(), 120.0, max_relative = 1e-9);
            }
        }
        let c: Vector3<f64> = v.iter().sum::<Vector3<f64>>() / 4.0;
        let gram: Matrix3<f64> = v.iter().map(|x| (x - c) * (x - c).transpose()).sum();
        assert!(gram.determinant() > 1.0);
    }

    proptest! {
        #[test]
        fn round_trip_range(r in 10.0..2000.0f64, n in 0.5..5.0f64, rssi0 in -30.0..30.0f64) {
            let m = PathLossModel { reference_rssi: rssi0, path_loss_exponent: n, ..PathLossModel::default() };
            let back = rssi_to_range(range_to_rssi(r, &m), &m);
            prop_assert!(((back - r) / r).abs() < 1e-9);
        }

        #[test]
        fn rssi_is_monotone(a in 0.0..5000.0f64, extra in 1e-3..1000.0f64) {
            let m = PathLossModel::default();
            prop_assert!(response_to_rssi(a + extra, &m) >= response_to_rssi(a, &m));
            prop_assert!(rssi_to_range(1.0, &m) < rssi_to_range(0.0, &m));
        }

        #[test]
        fn translation_equivariance(t in prop::array::uniform3(-1000.0..1000.0f64), d in prop::array::uniform3(-500.0..500.0f64)) {
            let truth = Point3::from(t);
            let shift = Vector3::from(d);
            let centers = [
                Point3::new(300.0, 0.0, 0.0),
                Point3::new(0.0, 300.0, 0.0),
                Point3::new(0.0, 0.0, 300.0),
                Point3::new(-200.0, -200.0, -200.0),
                Point3::new(100.0, -250.0, 50.0),
            ];
            let mut spheres = exact(truth, &centers);
            for (s, r) in spheres.iter_mut().zip([3.0, -2.0, 1.5, -4.0, 2.5]) {
                s.radius += r;
            }
            let moved: Vec<_> = spheres.iter().map(|s| RangeSphere { center: s.center + shift, ..*s }).collect();
            let a = extract_vertex(&spheres, &SolverOptions::default()).unwrap();
            let b = extract_vertex(&moved, &SolverOptions::default()).unwrap();
            prop_assert!((b.position - (a.position + shift)).norm() < 1e-6);
        }

        #[test]
        fn exact_sphere_never_increases_residual(t in prop::array::uniform3(-300.0..300.0f64), extra in prop::array::uniform3(-600.0..600.0f64)) {
            let truth = Point3::from(t);
            let centers = [
                Point3::new(400.0, 0.0, 0.0),
                Point3::new(0.0, 400.0, 0.0),
                Point3::new(0.0, 0.0, 400.0),
                Point3::new(-300.0, -300.0, -300.0),
            ];
            let mut spheres = exact(truth, &centers);
            let before = extract_vertex(&spheres, &SolverOptions::default()).unwrap();
            spheres.extend(exact(truth, &[Point3::from(extra)]));
            let after = extract_vertex(&spheres, &SolverOptions::default()).unwrap();
            prop_assert!(after.residual <= before.residual + 1e-9);
        }
    }
}
