//! Python bindings: phantoms, acquisition, per-sample statistics,
//! calibration and the table and trace experiments.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use qspace_core::calibration::CalibrationSet;
use qspace_core::error::Error;
use qspace_core::geometry::{Direction, Frame};
use qspace_core::harness::{
    calibrate_experiment, experiment_rotation, level_calibration, report_sample, run_fiber_trace, run_table3_with,
    resolve_calibration, ExperimentConfig,
};
use qspace_core::phantom::{
    acquire, electrostatic_scheme, AcquisitionScheme, DiffusionModel, EllipsoidModel, FiberEvolution, FiberKind,
    HardiSample, PaperModel,
};
use qspace_core::stats::{analyze_sample, summaries, Statistic, SummarySet};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for Result<T, Error> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Gradient directions plus the number of b=0 images.
#[pyclass(name = "Scheme", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyScheme(AcquisitionScheme);

#[pymethods]
impl PyScheme {
    /// Antipodally symmetric electrostatic-repulsion directions.
    #[staticmethod]
    #[pyo3(signature = (n, n0 = 1))]
    fn electrostatic(n: usize, n0: usize) -> PyResult<Self> {
        Ok(PyScheme(electrostatic_scheme(n).and_then(|s| s.with_n0(n0)).py()?))
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyScheme(AcquisitionScheme::parse(text, "<python>").py()?))
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn n0(&self) -> usize {
        self.0.n0()
    }

    #[getter]
    fn b_value(&self) -> f64 {
        self.0.b_value()
    }

    fn directions(&self) -> Vec<(f64, f64, f64)> {
        self.0.directions().iter().map(|d| (d.x(), d.y(), d.z())).collect()
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }
}

/// A noiseless q-space diffusion model.
#[pyclass(name = "Model", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(DiffusionModel);

#[pymethods]
impl PyModel {
    /// One of the simulation models A1..A6. With `seed`, the model is placed
    /// under that experiment's random rotation, as in the table runs.
    #[staticmethod]
    #[pyo3(signature = (name, seed = None))]
    fn paper(name: &str, seed: Option<u64>) -> PyResult<Self> {
        let m: PaperModel = name.parse().py()?;
        Ok(PyModel(match seed {
            Some(s) => m.model_in_experiment(&experiment_rotation(s)),
            None => m.model(),
        }))
    }

    /// Reference-kernel ellipsoid with eigenvalues along e1, e2, e3.
    #[staticmethod]
    fn ellipsoid(l1: f64, l2: f64, l3: f64) -> PyResult<Self> {
        let e = EllipsoidModel::reference([l1, l2, l3], Frame::canonical()).py()?;
        Ok(PyModel(DiffusionModel::Ellipsoid(e)))
    }

    /// Model value at the direction (x, y, z), normalised internally.
    fn eval(&self, x: f64, y: f64, z: f64) -> PyResult<f64> {
        let d = Direction::new(x, y, z).py()?;
        Ok(self.0.eval(&d))
    }

    /// Noiseless summaries tau, tau~, xi, zeta, kappa, GFA.
    #[pyo3(signature = (n = 128))]
    fn summaries<'py>(&self, py: Python<'py>, n: usize) -> PyResult<Bound<'py, PyDict>> {
        summary_dict(py, &qspace_core::harness::model_summaries(&self.0, n).py()?)
    }
}

/// Magnitudes of one voxel: diffusion-weighted values and b=0 values.
#[pyclass(name = "Sample", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySample(HardiSample);

#[pymethods]
impl PySample {
    #[new]
    #[pyo3(signature = (raw_values, b0_values, scheme, noise_sigma = None))]
    fn new(raw_values: Vec<f64>, b0_values: Vec<f64>, scheme: &PyScheme, noise_sigma: Option<f64>) -> PyResult<Self> {
        Ok(PySample(HardiSample::new(raw_values, b0_values, scheme.0.clone(), noise_sigma).py()?))
    }

    /// Rician magnitudes of `model` at noise `sigma` (a fraction of A(0)).
    #[staticmethod]
    fn acquire(model: &PyModel, scheme: &PyScheme, sigma: f64, seed: u64) -> PyResult<Self> {
        Ok(PySample(acquire(&model.0, &scheme.0, sigma, seed).py()?))
    }

    #[getter]
    fn raw_values(&self) -> Vec<f64> {
        self.0.raw_values.clone()
    }

    #[getter]
    fn b0_values(&self) -> Vec<f64> {
        self.0.b0_values.clone()
    }
}

/// Experiment configuration in the `key = value` format of the CLI.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        Ok(PyConfig(match text {
            Some(t) => ExperimentConfig::parse(t, "<python>").py()?,
            None => ExperimentConfig::default(),
        }))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).py()
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    fn canonical_text(&self) -> String {
        self.0.canonical_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }
}

/// Null calibration tables, as written by `qspace calibrate`.
#[pyclass(name = "Calibration", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCalibration(CalibrationSet);

#[pymethods]
impl PyCalibration {
    /// Calibrates every null of `config` at each of its noise levels.
    #[staticmethod]
    fn run(py: Python<'_>, config: &PyConfig) -> PyResult<Self> {
        let cfg = config.0.clone();
        Ok(PyCalibration(py.detach(move || calibrate_experiment(&cfg)).py()?))
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(PyCalibration(CalibrationSet::parse(text, "<python>").py()?))
    }

    fn to_csv(&self) -> PyResult<String> {
        self.0.to_csv().py()
    }
}

fn summary_dict<'py>(py: Python<'py>, s: &SummarySet) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tau", s.tau)?;
    d.set_item("tau_tilde", s.tau_tilde)?;
    d.set_item("xi", s.xi)?;
    d.set_item("zeta", s.zeta)?;
    d.set_item("kappa", s.kappa)?;
    d.set_item("gfa", s.gfa)?;
    Ok(d)
}

/// Test statistics and summaries of one sample.
#[pyfunction]
#[pyo3(signature = (sample, config = None))]
fn analyze<'py>(py: Python<'py>, sample: &PySample, config: Option<&PyConfig>) -> PyResult<Bound<'py, PyDict>> {
    let params = config.map(|c| c.0.params).unwrap_or_default();
    let (grid, stats) = analyze_sample(&sample.0, &params).py()?;
    let d = PyDict::new(py);
    d.set_item("T", stats.t)?;
    d.set_item("U", stats.u)?;
    d.set_item("Ttilde", stats.t_tilde)?;
    d.set_item("Utilde", stats.u_tilde)?;
    d.set_item("X", stats.x)?;
    d.set_item("Q", stats.q)?;
    d.set_item("Z", stats.z)?;
    d.set_item("V", stats.v)?;
    d.set_item("K", stats.k)?;
    d.set_item("sigma_A", stats.sigma_a)?;
    d.set_item("sigma_star", stats.sigma_star)?;
    let u1 = grid.frame().u1();
    d.set_item("u1", (u1.x(), u1.y(), u1.z()))?;
    d.set_item("summaries", summary_dict(py, &summaries(&grid))?)?;
    Ok(d)
}

/// Decisions, p-values and the voxel classification of one sample,
/// using the calibration tables for noise level `sigma`.
#[pyfunction]
fn classify<'py>(
    py: Python<'py>,
    sample: &PySample,
    config: &PyConfig,
    calibration: &PyCalibration,
    sigma: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let level = level_calibration(&config.0, &sample.0.scheme, sigma, &calibration.0).py()?;
    let report = report_sample(&sample.0, &config.0.params, &level).py()?;
    let decisions = PyDict::new(py);
    let p_values = PyDict::new(py);
    for stat in Statistic::ALL {
        decisions.set_item(stat.to_string(), report.decisions[&stat].to_string())?;
        if let Some(p) = report.p_values.get(&stat) {
            p_values.set_item(stat.to_string(), *p)?;
        }
    }
    let d = PyDict::new(py);
    d.set_item("decisions", decisions)?;
    d.set_item("p_values", p_values)?;
    d.set_item("classification", report.classification.to_string())?;
    Ok(d)
}

/// Runs the rejection table; returns `(csv, text)`.
#[pyfunction]
#[pyo3(signature = (config, calibration = None))]
fn table3(py: Python<'_>, config: &PyConfig, calibration: Option<&PyCalibration>) -> PyResult<(String, String)> {
    let cfg = config.0.clone();
    let cal = calibration.map(|c| c.0.clone());
    let table = py
        .detach(move || {
            let cal = match cal {
                Some(c) => c,
                None => resolve_calibration(&cfg)?,
            };
            run_table3_with(&cfg, &cal)
        })
        .py()?;
    Ok((table.to_csv().py()?, table.to_text()))
}

/// Noiseless summaries along the `forking` or `crossing` voxel sequence.
#[pyfunction]
#[pyo3(signature = (kind, n = 128))]
fn fiber_trace<'py>(py: Python<'py>, kind: &str, n: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let kind: FiberKind = kind.parse().py()?;
    let rows = run_fiber_trace(&FiberEvolution::new(kind), n).py()?;
    rows.iter()
        .map(|r| {
            let d = summary_dict(py, &r.summary)?;
            d.set_item("voxel", r.voxel)?;
            d.set_item("weight", r.weight)?;
            Ok(d)
        })
        .collect()
}

/// Dawson's integral F(x).
#[pyfunction]
fn dawson(x: f64) -> f64 {
    qspace_core::phantom::dawson(x)
}

#[pymodule(name = "qspace")]
fn qspace_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScheme>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCalibration>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(table3, m)?)?;
    m.add_function(wrap_pyfunction!(fiber_trace, m)?)?;
    m.add_function(wrap_pyfunction!(dawson, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
