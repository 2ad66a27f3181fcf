use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rxr::bench::{plan, run as run_experiment, ExperimentConfig};
use rxr::envs::{observe, step, Environment, TaskSpec};
use rxr::state::{ActionVec, StateVec};

fn config(text: &str) -> PyResult<ExperimentConfig> {
    let cfg = ExperimentConfig::parse(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(cfg)
}

/// Canonical `key = value` echo of a config text, with every default filled in.
#[pyfunction]
fn echo_config(text: &str) -> PyResult<String> {
    Ok(config(text)?.echo())
}

/// SHA-256 of the canonical echo.
#[pyfunction]
fn config_hash(text: &str) -> PyResult<String> {
    Ok(config(text)?.hash())
}

/// Grow the planner tree described by a config and report its size, coverage and hash.
#[pyfunction]
fn grow_tree<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(text)?;
    let env = cfg.env.build();
    let tree = py.detach(|| plan(&cfg, env.as_ref())).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("nodes", tree.len())?;
    d.set_item("coverage", tree.coverage())?;
    d.set_item("hash", tree.hash())?;
    Ok(d)
}

/// Run the full pipeline into `out` and return the headline metrics.
#[pyfunction]
fn run<'py>(py: Python<'py>, text: &str, out: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(text)?;
    let r = py.detach(|| run_experiment(&cfg, &out)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("config_hash", r.config_hash)?;
    d.set_item("validation_return", r.metrics.validation_return)?;
    d.set_item("train_return", r.metrics.train_return)?;
    d.set_item("env_steps", r.metrics.env_steps)?;
    d.set_item("iterations", r.metrics.iterations)?;
    d.set_item("tree_nodes", r.metrics.tree_nodes)?;
    Ok(d)
}

/// Stepping handle over one configured environment and task.
#[pyclass(name = "Env", unsendable)]
struct PyEnv {
    env: Box<dyn Environment>,
    task: TaskSpec,
    state: StateVec,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        let cfg = config(text)?;
        let env = cfg.env.build();
        let state = env.initial_state();
        Ok(Self { env, task: cfg.task, state })
    }

    #[getter]
    fn name(&self) -> String {
        self.env.name().to_string()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.env.action_dim()
    }

    #[getter]
    fn state(&self) -> Vec<f64> {
        self.state.values().to_vec()
    }

    /// Return to the initial state and give its observation.
    fn reset(&mut self) -> Vec<f64> {
        self.state = self.env.initial_state();
        let sp = self.env.joint_values(&self.state);
        observe(self.env.as_ref(), &self.state, &sp, &self.task).into_values()
    }

    /// Apply one action; returns `(observation, reward, dropped, success)`.
    fn step(&mut self, action: Vec<f64>) -> PyResult<(Vec<f64>, f64, bool, bool)> {
        let a = ActionVec::new(action).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let r = step(self.env.as_ref(), &self.state, &a, &self.task).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.state = r.next;
        Ok((r.observation.into_values(), r.reward, r.dropped, r.success))
    }

    fn progress(&self) -> f64 {
        self.env.progress(&self.state)
    }
}

#[pymodule]
fn rxr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(echo_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(grow_tree, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyEnv>()?;
    Ok(())
}
