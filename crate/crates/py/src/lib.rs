//! Python bindings for the simulator core.

use nalgebra::Point3;
use oio_core::arm::{forward_kinematics as fk, ArmConfig, DofMode, JOINT_COUNT};
use oio_core::belief::{extract_vertex as vertex, RangeSphere, SolverOptions};
use oio_core::bout::{window_for_dof as window, BaselineRule, BoutState};
use oio_core::calibration;
use oio_core::ekf::{EkfState, NoiseTuning, Prior};
use oio_core::plume::PlumeParams;
use oio_core::runner;
use oio_core::scenario::{ExperimentMode, ScenarioConfig};
use oio_core::sensor::{self, SensorKind};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_value(Value::String(text.to_string())).map_err(|_| PyValueError::new_err(format!("unknown name {text:?}")))
}

fn dof_mode(dof: usize) -> PyResult<DofMode> {
    match dof {
        1 => Ok(DofMode::Dof1),
        2 => Ok(DofMode::Dof2),
        3 => Ok(DofMode::Dof3),
        5 => Ok(DofMode::Dof5),
        _ => Err(PyValueError::new_err(format!("dof must be 1, 2, 3 or 5, got {dof}"))),
    }
}

fn point(p: [f64; 3]) -> Point3<f64> {
    Point3::new(p[0], p[1], p[2])
}

fn to_python<'py>(py: Python<'py>, value: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match value {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_python(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, to_python(py, v)?)?;
            }
            dict.into_any()
        }
    })
}

/// Tip position (mm) of the default arm for five joint angles (deg).
#[pyfunction]
fn forward_kinematics(angles: [f64; JOINT_COUNT]) -> [f64; 3] {
    let p = fk(&angles, &ArmConfig::default());
    [p.x, p.y, p.z]
}

/// Moving-average window for a 1, 2, 3 or 5 DoF stage.
#[pyfunction]
fn window_for_dof(dof: usize) -> PyResult<usize> {
    Ok(window(dof_mode(dof)?))
}

/// s/√k
#[pyfunction]
fn type_a(s: f64, k: usize) -> f64 {
    calibration::type_a(s, k)
}

/// 2v/√m
#[pyfunction]
fn type_b(v: f64, m: usize) -> f64 {
    calibration::type_b(v, m)
}

/// Catalog entry for a sensor family ("ndir", "pa", "ec", "mox_mq", "mox_mics").
#[pyfunction]
fn catalog<'py>(py: Python<'py>, kind: &str) -> PyResult<Bound<'py, PyAny>> {
    let spec = sensor::catalog(parse::<SensorKind>(kind)?);
    to_python(py, &serde_json::to_value(spec).map_err(value_error)?)
}

/// Weighted least-squares intersection of spheres; returns (vertex, residual).
#[pyfunction]
#[pyo3(signature = (centers, radii, weights=None))]
fn extract_vertex(centers: Vec<[f64; 3]>, radii: Vec<f64>, weights: Option<Vec<f64>>) -> PyResult<([f64; 3], f64)> {
    if centers.len() != radii.len() || weights.as_ref().is_some_and(|w| w.len() != radii.len()) {
        return Err(PyValueError::new_err("centers, radii and weights must have the same length"));
    }
    let spheres: Vec<RangeSphere> = centers
        .iter()
        .zip(&radii)
        .enumerate()
        .map(|(i, (c, r))| RangeSphere {
            center: point(*c),
            radius: *r,
            weight: weights.as_ref().map_or(1.0, |w| w[i]),
        })
        .collect();
    let fit = vertex(&spheres, &SolverOptions::default()).map_err(value_error)?;
    Ok(([fit.position.x, fit.position.y, fit.position.z], fit.residual))
}

/// Gaussian plume; keyword arguments override the defaults.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Plume {
    params: PlumeParams,
}

#[pymethods]
impl Plume {
    #[new]
    #[pyo3(signature = (source=None, amplitude=None, sigma0=None, spread_rate=None, decay_lambda=None, wind=None))]
    fn new(
        source: Option<[f64; 3]>,
        amplitude: Option<f64>,
        sigma0: Option<f64>,
        spread_rate: Option<f64>,
        decay_lambda: Option<f64>,
        wind: Option<[f64; 3]>,
    ) -> PyResult<Self> {
        let d = PlumeParams::default();
        let params = PlumeParams {
            source_position: source.map(point).unwrap_or(d.source_position),
            amplitude: amplitude.unwrap_or(d.amplitude),
            sigma0: sigma0.unwrap_or(d.sigma0),
            spread_rate: spread_rate.unwrap_or(d.spread_rate),
            decay_lambda: decay_lambda.unwrap_or(d.decay_lambda),
            wind: wind.map(|w| w.into()).unwrap_or(d.wind),
        };
        params.validate().map_err(value_error)?;
        Ok(Self { params })
    }

    /// ppm at `point` (mm) and time `t` (s).
    fn concentration(&self, point: [f64; 3], t: f64) -> f64 {
        self.params.concentration(&self::point(point), t)
    }

    fn center(&self, t: f64) -> [f64; 3] {
        self.params.center(t).into()
    }
}

/// Moving-average bout detector.
#[pyclass]
struct BoutFilter {
    state: BoutState,
}

#[pymethods]
impl BoutFilter {
    #[new]
    #[pyo3(signature = (baseline, k, rule="max"))]
    fn new(baseline: Vec<f64>, k: usize, rule: &str) -> PyResult<Self> {
        let rule: BaselineRule = parse(rule)?;
        Ok(Self {
            state: BoutState::capture_baseline(&baseline, k, rule).map_err(value_error)?,
        })
    }

    /// Feeds one reading; returns (smoothed, delta, is_bout).
    fn update(&mut self, y: f64) -> PyResult<(f64, f64, bool)> {
        let d = self.state.update(y).map_err(value_error)?;
        Ok((d.smoothed, d.delta, d.is_bout))
    }

    #[getter]
    fn threshold(&self) -> Option<f64> {
        self.state.threshold()
    }
}

/// Source-position and bias filter.
#[pyclass]
struct Ekf {
    state: EkfState,
}

fn update_dict<'py>(py: Python<'py>, info: &oio_core::ekf::UpdateInfo) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("innovation", info.innovation)?;
    d.set_item("innovation_variance", info.innovation_variance)?;
    d.set_item("nis", info.nis)?;
    d.set_item("gated", info.gated)?;
    Ok(d)
}

#[pymethods]
impl Ekf {
    /// Uncalibrated filter with catalog noise and the given process noise (mm²/s).
    #[staticmethod]
    #[pyo3(signature = (kind, position, position_std, bias_std, q_position))]
    fn cold_start(kind: &str, position: [f64; 3], position_std: f64, bias_std: f64, q_position: f64) -> PyResult<Self> {
        let spec = sensor::catalog(parse(kind)?);
        let prior = Prior::isotropic(point(position), position_std, bias_std);
        Ok(Self {
            state: EkfState::cold_start(&spec, &prior, q_position, &NoiseTuning::default(), 0.0),
        })
    }

    /// Filter initialised from an uncertainty budget: R = u_a², Q = u_b² per second.
    #[staticmethod]
    #[pyo3(signature = (kind, position, position_std, bias_std, u_a, u_b))]
    fn from_budget(kind: &str, position: [f64; 3], position_std: f64, bias_std: f64, u_a: f64, u_b: f64) -> PyResult<Self> {
        let spec = sensor::catalog(parse(kind)?);
        let prior = Prior::isotropic(point(position), position_std, bias_std);
        let mut budget = calibration::UncertaintyBudget::default();
        budget.type_a.insert(DofMode::Dof5, calibration::TypeA { s: u_a, k: 1, u_a });
        budget.type_b = Some(calibration::TypeB { v: u_b / 2.0, m: 1, u_b });
        let state = EkfState::init_from_budget(&budget, DofMode::Dof5, &spec, &prior, &NoiseTuning::default(), 0.0)
            .map_err(value_error)?;
        Ok(Self { state })
    }

    fn predict(&mut self, dt: f64) -> PyResult<()> {
        self.state = self.state.predict(dt).map_err(value_error)?;
        Ok(())
    }

    fn update_range<'py>(&mut self, py: Python<'py>, range: f64, tip: [f64; 3], variance: f64) -> PyResult<Bound<'py, PyDict>> {
        let (next, info) = self.state.update_range(range, &point(tip), variance).map_err(value_error)?;
        self.state = next;
        update_dict(py, &info)
    }

    fn update_concentration<'py>(
        &mut self,
        py: Python<'py>,
        reading: f64,
        tip: [f64; 3],
        plume: &Plume,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (next, info) = self
            .state
            .update_concentration(reading, &point(tip), &plume.params)
            .map_err(value_error)?;
        self.state = next;
        update_dict(py, &info)
    }

    /// [x, y, z, bias]
    #[getter]
    fn x(&self) -> [f64; 4] {
        self.state.x.into()
    }

    /// Row-major 4×4 covariance.
    #[getter]
    fn p(&self) -> Vec<Vec<f64>> {
        (0..4).map(|i| (0..4).map(|j| self.state.p[(i, j)]).collect()).collect()
    }

    #[getter]
    fn r(&self) -> f64 {
        self.state.r
    }

    #[getter]
    fn t(&self) -> f64 {
        self.state.t
    }

    fn is_psd(&self) -> bool {
        self.state.covariance_is_psd()
    }
}

/// Default scenario as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    toml::to_string(&ScenarioConfig::default()).map_err(value_error)
}

/// Runs a scenario and returns the report (resolved config, per-seed rows
/// and aggregates) as plain Python objects. `output_dir` also writes every
/// CSV and JSON artefact.
#[pyfunction]
#[pyo3(signature = (config="", mode=None, seeds=None, jobs=0, output_dir=None))]
fn run<'py>(
    py: Python<'py>,
    config: &str,
    mode: Option<&str>,
    seeds: Option<Vec<u64>>,
    jobs: usize,
    output_dir: Option<std::path::PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = ScenarioConfig::from_toml_str(config).map_err(value_error)?;
    if let Some(mode) = mode {
        cfg.mode = parse::<ExperimentMode>(mode)?;
    }
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
    }
    cfg.validate().map_err(value_error)?;
    let report = py
        .detach(|| runner::run(&cfg, jobs))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    if let Some(dir) = output_dir {
        runner::write_outputs(&report, &dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    }
    to_python(py, &serde_json::to_value(&report).map_err(value_error)?)
}

#[pymodule]
fn oio(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(forward_kinematics, m)?)?;
    m.add_function(wrap_pyfunction!(window_for_dof, m)?)?;
    m.add_function(wrap_pyfunction!(type_a, m)?)?;
    m.add_function(wrap_pyfunction!(type_b, m)?)?;
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    m.add_function(wrap_pyfunction!(extract_vertex, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<Plume>()?;
    m.add_class::<BoutFilter>()?;
    m.add_class::<Ekf>()?;
    Ok(())
}
