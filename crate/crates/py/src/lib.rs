//! Python bindings: scenarios, runs, step-wise simulation, patterns and workloads.

use std::fs::File;

use flightq::geometry::{build_pattern, min_slot_clearance, Pattern, PatternSpec};
use flightq::scenario::{self, PatternConfig};
use flightq::sim::{self, RunOutput};
use flightq::Vec3;
use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Converts any serializable value into plain Python objects via JSON.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[derive(Serialize)]
struct RunView<'a> {
    metrics: &'a sim::Metrics,
    admissions: &'a [sim::Admission],
    failures: &'a [sim::Failure],
    breaches: &'a [String],
    clean: bool,
}

fn run_view<'py>(py: Python<'py>, out: &RunOutput) -> PyResult<Bound<'py, PyAny>> {
    to_py(
        py,
        &RunView {
            metrics: &out.metrics,
            admissions: &out.admissions,
            failures: &out.failures,
            breaches: &out.breaches,
            clean: out.clean(),
        },
    )
}

/// A validated scenario.
#[pyclass(name = "Scenario", module = "flightq_py", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: scenario::Scenario,
}

#[pymethods]
impl PyScenario {
    /// Parses and validates scenario text (TOML).
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        scenario::parse_scenario(text).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        scenario::load_scenario(path.as_ref()).map(|inner| Self { inner }).map_err(value_err)
    }

    /// One of the built-in gallery scenarios.
    #[staticmethod]
    fn gallery(name: &str) -> PyResult<Self> {
        scenario::gallery_scenario(name)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyKeyError::new_err(format!("no gallery scenario `{name}`")))
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.sim.seed
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.sim.horizon
    }

    #[setter]
    fn set_horizon(&mut self, horizon: f64) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.sim.horizon = horizon;
        let errors = next.validate();
        if !errors.is_empty() {
            return Err(PyValueError::new_err(errors.join("; ")));
        }
        self.inner = next;
        Ok(())
    }

    fn to_toml(&self) -> PyResult<String> {
        scenario::render_scenario(&self.inner).map_err(value_err)
    }

    /// The scenario as nested dicts and lists.
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    /// Slot coordinates of every opening's pattern, in slot order.
    fn slots(&self) -> PyResult<Vec<Vec<(f64, f64, f64)>>> {
        let patterns = self.inner.patterns().map_err(|e| PyValueError::new_err(e.join("; ")))?;
        Ok(patterns.iter().map(|p| p.slots().iter().map(|s| (s.x, s.y, s.z)).collect()).collect())
    }

    /// Arrival list for `seed` as dicts.
    #[pyo3(signature = (seed=None))]
    fn arrivals<'py>(&self, py: Python<'py>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        let arrivals = self.inner.arrivals(seed.unwrap_or(self.inner.sim.seed)).map_err(value_err)?;
        to_py(py, &arrivals)
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, openings={})", self.inner.name, self.inner.openings.len())
    }
}

/// Step-wise access to a running simulation.
#[pyclass(name = "Simulation", module = "flightq_py", unsendable)]
struct PySimulation {
    inner: Option<sim::Simulation>,
}

impl PySimulation {
    fn sim(&self) -> PyResult<&sim::Simulation> {
        self.inner.as_ref().ok_or_else(|| PyRuntimeError::new_err("simulation already finished"))
    }

    fn sim_mut(&mut self) -> PyResult<&mut sim::Simulation> {
        self.inner.as_mut().ok_or_else(|| PyRuntimeError::new_err("simulation already finished"))
    }
}

#[pymethods]
impl PySimulation {
    #[new]
    #[pyo3(signature = (scenario, seed=None, trace_path=None))]
    fn new(scenario: &PyScenario, seed: Option<u64>, trace_path: Option<&str>) -> PyResult<Self> {
        let seed = seed.unwrap_or(scenario.inner.sim.seed);
        let mut sim = sim::Simulation::from_scenario(&scenario.inner, seed).map_err(value_err)?;
        if let Some(path) = trace_path {
            let file = File::create(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
            sim = sim.with_trace(Box::new(file), &scenario.inner.name, seed).map_err(value_err)?;
        }
        Ok(Self { inner: Some(sim) })
    }

    /// Advances `ticks` steps, stopping early once every drone is done.
    #[pyo3(signature = (ticks=1))]
    fn step(&mut self, ticks: u64) -> PyResult<()> {
        let sim = self.sim_mut()?;
        for _ in 0..ticks {
            if sim.finished() {
                break;
            }
            sim.step();
        }
        Ok(())
    }

    #[getter]
    fn clock(&self) -> PyResult<f64> {
        Ok(self.sim()?.clock())
    }

    #[getter]
    fn finished(&self) -> PyResult<bool> {
        Ok(self.sim()?.finished())
    }

    /// `(id, x, y, z)` of every drone still in the air.
    fn airborne(&self) -> PyResult<Vec<(u64, f64, f64, f64)>> {
        Ok(self.sim()?.airborne().into_iter().map(|(id, p)| (id, p.x, p.y, p.z)).collect())
    }

    fn census<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.sim()?.census())
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.sim()?.metrics())
    }

    /// Drone ids in slot order for each opening.
    fn queues(&self) -> PyResult<Vec<Vec<u64>>> {
        Ok(self.sim()?.openings().iter().map(|o| o.queue.order()).collect())
    }

    /// Runs to the horizon, closes the trace and returns the results.
    fn run_to_end<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let sim = self.inner.take().ok_or_else(|| PyRuntimeError::new_err("simulation already finished"))?;
        let out = sim.run_to_end().map_err(value_err)?;
        run_view(py, &out)
    }
}

/// Runs a scenario to completion; returns metrics, admissions and failures.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None, trace_path=None))]
fn run<'py>(py: Python<'py>, scenario: &PyScenario, seed: Option<u64>, trace_path: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let mut sim = PySimulation::new(scenario, seed, trace_path)?;
    sim.run_to_end(py)
}

#[pyfunction]
fn gallery_names() -> Vec<&'static str> {
    scenario::GALLERY.to_vec()
}

/// Every problem in scenario text; empty when it is valid.
#[pyfunction]
fn validate(text: &str) -> Vec<String> {
    match scenario::parse_scenario(text) {
        Ok(_) => Vec::new(),
        Err(scenario::ScenarioError::Invalid(errors)) => errors,
        Err(e) => vec![e.to_string()],
    }
}

/// Slot coordinates for a pattern given as a dict, e.g.
/// `{"shape": "circle", "radius": 1.0, "slots": 8}`.
#[pyfunction]
#[pyo3(signature = (pattern, anchor=(0.0, 0.0, 0.0)))]
fn pattern_slots(pattern: &Bound<'_, PyAny>, anchor: (f64, f64, f64)) -> PyResult<Vec<(f64, f64, f64)>> {
    let p = pattern_from(pattern, anchor)?;
    Ok(p.slots().iter().map(|s| (s.x, s.y, s.z)).collect())
}

/// Smallest distance between two slots of a pattern.
#[pyfunction]
fn slot_clearance(pattern: &Bound<'_, PyAny>) -> PyResult<f64> {
    min_slot_clearance(&pattern_from(pattern, (0.0, 0.0, 0.0))?).map_err(value_err)
}

fn pattern_from(pattern: &Bound<'_, PyAny>, anchor: (f64, f64, f64)) -> PyResult<Pattern> {
    let json: String = pattern.py().import("json")?.call_method1("dumps", (pattern,))?.extract()?;
    let config: PatternConfig = serde_json::from_str(&json).map_err(value_err)?;
    let anchor = Vec3::new(anchor.0, anchor.1, anchor.2);
    let spec = match config.slots {
        Some(n) => PatternSpec::new(config.shape, n, anchor),
        None => PatternSpec::composite(config.shape, anchor),
    }
    .with_orientation(config.orientation);
    build_pattern(&spec).map_err(value_err)
}

/// Closest pair and every pair closer than `delta_min`.
#[pyfunction]
fn check_separation(positions: Vec<(f64, f64, f64)>, delta_min: f64) -> (f64, Vec<(u64, u64, f64)>) {
    let drones: Vec<(u64, Vec3)> =
        positions.iter().enumerate().map(|(i, p)| (i as u64, Vec3::new(p.0, p.1, p.2))).collect();
    sim::check_separation(&drones, delta_min)
}

#[pymodule]
fn flightq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(gallery_names, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_slots, m)?)?;
    m.add_function(wrap_pyfunction!(slot_clearance, m)?)?;
    m.add_function(wrap_pyfunction!(check_separation, m)?)?;
    Ok(())
}
