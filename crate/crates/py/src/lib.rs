use std::path::PathBuf;

use mfpmp::cli::{self, Command, Prepared};
use mfpmp::dynamics::Trajectory as CoreTrajectory;
use mfpmp::optimizer::{optimize, parameter_gradient, total_cost};
use mfpmp::pmp::extremal;
use mfpmp::transport::wasserstein as core_wasserstein;
use mfpmp::EmpiricalMeasure;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn value_err(e: mfpmp::Error) -> PyErr {
    match e {
        mfpmp::Error::Scenario(_)
        | mfpmp::Error::EmptyMeasure
        | mfpmp::Error::DimensionMismatch { .. }
        | mfpmp::Error::InvalidWeights(_)
        | mfpmp::Error::InvalidArgument(_)
        | mfpmp::Error::ZeroWeightParticle(_)
        | mfpmp::Error::TimeGrid(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
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
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

/// Weighted point cloud with weights summing to one.
#[pyclass(name = "Measure", module = "mfpmp_py", from_py_object)]
#[derive(Clone)]
struct Measure {
    inner: EmpiricalMeasure,
}

#[pymethods]
impl Measure {
    /// Weights default to uniform; other weights are normalized.
    #[new]
    #[pyo3(signature = (points, weights=None))]
    fn new(points: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> PyResult<Self> {
        let inner = match weights {
            None => EmpiricalMeasure::uniform(&points),
            Some(w) => {
                let dim = points.first().map_or(0, Vec::len);
                EmpiricalMeasure::from_unnormalized(dim, points.concat(), w)
            }
        }
        .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn points(&self) -> Vec<Vec<f64>> {
        self.inner.to_rows()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn mean(&self) -> Vec<f64> {
        self.inner.mean()
    }

    fn variance(&self) -> f64 {
        self.inner.variance()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Measure(n={}, dim={})", self.inner.len(), self.inner.dim())
    }
}

/// Particle positions on the simulation grid, with costates when the run
/// came from an extremal.
#[pyclass(name = "Trajectory", module = "mfpmp_py")]
struct Trajectory {
    inner: CoreTrajectory,
    costates: Option<Vec<Vec<f64>>>,
}

#[pymethods]
impl Trajectory {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times.clone()
    }

    fn state(&self, k: usize) -> PyResult<Measure> {
        self.inner
            .states
            .get(k)
            .map(|m| Measure { inner: m.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("node {k} out of range")))
    }

    fn terminal(&self) -> Measure {
        Measure {
            inner: self.inner.terminal().clone(),
        }
    }

    /// Per-particle costate rows at node `k`, or None for a forward run.
    fn costate(&self, k: usize) -> PyResult<Option<Vec<Vec<f64>>>> {
        let Some(c) = &self.costates else { return Ok(None) };
        let flat = c.get(k).ok_or_else(|| PyValueError::new_err(format!("node {k} out of range")))?;
        Ok(Some(flat.chunks(self.inner.dim()).map(<[f64]>::to_vec).collect()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A validated scenario: problem, starting control and optional target.
#[pyclass(name = "Scenario", module = "mfpmp_py")]
struct Scenario {
    inner: Prepared,
}

impl Scenario {
    fn control_for(&self, params: Option<Vec<f64>>) -> PyResult<mfpmp::dynamics::ControlSignal> {
        match params {
            None => Ok(self.inner.control.clone()),
            Some(p) => self.inner.problem.control_from_params(&p).map_err(value_err),
        }
    }
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let s = cli::parse_scenario_str(text).map_err(value_err)?;
        Ok(Self {
            inner: s.prepare().map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let s = cli::parse_scenario(&path).map_err(value_err)?;
        Ok(Self {
            inner: s.prepare().map_err(value_err)?,
        })
    }

    #[getter]
    fn initial(&self) -> Measure {
        Measure {
            inner: self.inner.problem.initial.clone(),
        }
    }

    #[getter]
    fn target(&self) -> Option<Measure> {
        self.inner.target.clone().map(|inner| Measure { inner })
    }

    /// Parameters of the scenario's control, interval by interval.
    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.control.params()
    }

    #[pyo3(signature = (params=None))]
    fn simulate(&self, py: Python<'_>, params: Option<Vec<f64>>) -> PyResult<Trajectory> {
        let u = self.control_for(params)?;
        let problem = &self.inner.problem;
        let inner = py.detach(|| problem.simulate(&u)).map_err(value_err)?;
        Ok(Trajectory { inner, costates: None })
    }

    #[pyo3(signature = (params=None))]
    fn extremal(&self, py: Python<'_>, params: Option<Vec<f64>>) -> PyResult<Trajectory> {
        let u = self.control_for(params)?;
        let problem = &self.inner.problem;
        let ext = py.detach(|| extremal(problem, &u)).map_err(value_err)?;
        let costates = (0..ext.costate.len()).map(|k| ext.costate.costate(k).to_vec()).collect();
        Ok(Trajectory {
            inner: ext.trajectory,
            costates: Some(costates),
        })
    }

    #[pyo3(signature = (params=None))]
    fn cost(&self, py: Python<'_>, params: Option<Vec<f64>>) -> PyResult<f64> {
        let u = self.control_for(params)?;
        let problem = &self.inner.problem;
        py.detach(|| total_cost(problem, &u)).map_err(value_err)
    }

    #[pyo3(signature = (params=None))]
    fn gradient(&self, py: Python<'_>, params: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
        let u = self.control_for(params)?;
        let problem = &self.inner.problem;
        py.detach(|| parameter_gradient(problem, &u)).map_err(value_err)
    }

    /// Projected descent from `params` (default: the scenario's control)
    /// with the scenario's optimizer options.
    #[pyo3(signature = (params=None))]
    fn optimize<'py>(&self, py: Python<'py>, params: Option<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let u = self.control_for(params)?;
        let problem = &self.inner.problem;
        let options = &self.inner.scenario.optimizer;
        let run = py.detach(|| optimize(problem, &u, options)).map_err(value_err)?;
        let out = PyDict::new(py);
        out.set_item("params", run.control().params())?;
        out.set_item("cost", run.cost)?;
        out.set_item("gradient_norm", run.gradient_norm)?;
        out.set_item("converged", run.converged)?;
        out.set_item("iterations", run.iterates.len() - 1)?;
        out.set_item("costs", run.iterates.iter().map(|it| it.cost).collect::<Vec<_>>())?;
        Ok(out)
    }

    /// Runs a CLI command, writing its files into `out`; returns the report.
    #[pyo3(signature = (command, out))]
    fn run<'py>(&self, py: Python<'py>, command: &str, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let command: Command = serde_json::from_value(serde_json::Value::String(command.to_string()))
            .map_err(|_| PyValueError::new_err(format!("unknown command {command:?}")))?;
        let prepared = &self.inner;
        let report = py.detach(|| cli::run(command, prepared, &out)).map_err(value_err)?;
        let value = serde_json::to_value(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        to_py(py, &value)
    }
}

/// Exact `W_p` (p = 1 or 2) with the optimal plan as an `n x m` nested list.
#[pyfunction]
fn wasserstein(p: u32, mu: &Measure, nu: &Measure) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let sol = core_wasserstein(p, &mu.inner, &nu.inner).map_err(value_err)?;
    let m = nu.inner.len();
    let plan = sol.plan.coupling().chunks(m).map(<[f64]>::to_vec).collect();
    Ok((sol.distance, plan))
}

#[pymodule]
fn mfpmp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Measure>()?;
    m.add_class::<Trajectory>()?;
    m.add_class::<Scenario>()?;
    m.add_function(wrap_pyfunction!(wasserstein, m)?)?;
    Ok(())
}
