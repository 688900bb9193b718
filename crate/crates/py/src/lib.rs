//! Python bindings: simulation, datasets, the model and the HA baseline.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use engine::checkpoint::ModelCheckpoint;
use engine::config::RunConfig;
use engine::dataset::{Dataset, Split};
use engine::model::Stgnpp;
use engine::predict::{self, MetricsReport};
use engine::synthgen::{self, Scenario};
use engine::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Param(_) | Error::Shape { .. } | Error::Domain(_) | Error::Index(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "validation" | "val" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    }
}

fn report<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("nll", r.nll)?;
    d.set_item("mae_t", r.mae_t)?;
    d.set_item("mae_d", r.mae_d)?;
    d.set_item("n_eval", r.n_eval)?;
    d.set_item("n_excluded", r.n_excluded)?;
    d.set_item("n_transitions", r.n_transitions)?;
    Ok(d)
}

/// Synthetic road network, speeds and congestion events.
#[pyclass(name = "Simulation", frozen)]
struct PySimulation {
    inner: synthgen::Simulation,
    scenario: Scenario,
}

#[pymethods]
impl PySimulation {
    #[getter]
    fn n_links(&self) -> usize {
        self.inner.graph.n_links
    }

    #[getter]
    fn n_slots(&self) -> usize {
        self.inner.states.n_slots
    }

    #[getter]
    fn scenario(&self) -> String {
        self.scenario.to_string()
    }

    /// `(link, t_occ_min, duration_min)` for every event, link by link.
    fn events(&self) -> Vec<(usize, f64, f64)> {
        self.inner
            .events
            .iter()
            .flatten()
            .map(|e| (e.link, e.t_occ, e.duration))
            .collect()
    }

    /// Speed series (km/h) of one link.
    fn speeds(&self, link: usize) -> PyResult<Vec<f64>> {
        let s = &self.inner.states;
        if link >= s.n_links {
            return Err(PyValueError::new_err(format!("link {link} out of range")));
        }
        Ok(s.speeds[link * s.n_slots..(link + 1) * s.n_slots].to_vec())
    }

    /// Writes the dataset directory read by `Dataset.load` and the CLI.
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        engine::io::write_dataset(&dir, &self.inner, &self.scenario.to_string()).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (scenario = "standard", links = 30, days = 14.0, seed = 0))]
fn simulate(scenario: &str, links: usize, days: f64, seed: u64) -> PyResult<PySimulation> {
    let scenario: Scenario = scenario.parse().map_err(to_py)?;
    let inner = synthgen::simulate(scenario, links, days, seed).map_err(to_py)?;
    Ok(PySimulation { inner, scenario })
}

/// Windowed view of a dataset with chronological splits.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (sim, window_slots = 72))]
    fn from_simulation(sim: &PySimulation, window_slots: usize) -> PyResult<Self> {
        let fractions = RunConfig::default().fractions();
        let inner = Dataset::from_simulation(&sim.inner, window_slots, fractions).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (dir, window_slots = 72))]
    fn load(dir: PathBuf, window_slots: usize) -> PyResult<Self> {
        let (graph, states, events) = engine::io::read_dataset(&dir).map_err(to_py)?;
        let fractions = RunConfig::default().fractions();
        let inner = Dataset::new(graph, events, states, window_slots, fractions).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_links(&self) -> usize {
        self.inner.n_links()
    }

    #[getter]
    fn n_slots(&self) -> usize {
        self.inner.states.n_slots
    }

    #[getter]
    fn window_slots(&self) -> usize {
        self.inner.window_slots
    }

    fn window_ends(&self, split_name: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.window_ends(split(split_name)?))
    }
}

/// The STGNPP model with its run configuration.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Stgnpp,
    run: RunConfig,
}

#[pymethods]
impl PyModel {
    /// `config` holds the same `key=value` settings as a CLI config file.
    #[new]
    #[pyo3(signature = (n_links, seed = 0, config = None))]
    fn new(n_links: usize, seed: u64, config: Option<HashMap<String, String>>) -> PyResult<Self> {
        let mut run = RunConfig::default();
        for (k, v) in config.unwrap_or_default() {
            run.set(&k, &v).map_err(to_py)?;
        }
        run.seed = seed;
        run.validate().map_err(to_py)?;
        let inner = Stgnpp::new(run.model(n_links), seed).map_err(to_py)?;
        Ok(Self { inner, run })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, run) = ModelCheckpoint::load(&path).and_then(|c| c.to_model()).map_err(to_py)?;
        Ok(Self { inner, run })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ModelCheckpoint::from_model(&self.inner, &self.run).save(&path).map_err(to_py)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params.numel()
    }

    #[getter]
    fn window_slots(&self) -> usize {
        self.run.window_slots
    }

    /// Trains in place, keeping the best-validation parameters. Returns the
    /// per-epoch log as a list of dicts.
    #[pyo3(signature = (dataset, epochs = None))]
    fn train<'py>(&mut self, py: Python<'py>, dataset: &PyDataset, epochs: Option<usize>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        if let Some(e) = epochs {
            self.run.epochs = e;
        }
        let out = engine::train::train(&mut self.inner, &dataset.inner, &self.run.training()).map_err(to_py)?;
        out.log
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("val_nll", r.val_nll)?;
                d.set_item("val_mae_t", r.val_mae_t)?;
                d.set_item("val_mae_d", r.val_mae_d)?;
                Ok(d)
            })
            .collect()
    }

    #[pyo3(signature = (dataset, split_name = "test"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, split_name: &str) -> PyResult<Bound<'py, PyDict>> {
        let r = predict::evaluate(&self.inner, &dataset.inner, split(split_name)?).map_err(to_py)?;
        report(py, &r)
    }

    /// `(link, t_next_min, d_next_min)` for the window ending at `end_slot`
    /// (default: the end of the data).
    #[pyo3(signature = (dataset, end_slot = None))]
    fn predict(&self, dataset: &PyDataset, end_slot: Option<usize>) -> PyResult<Vec<(usize, f64, f64)>> {
        let end = end_slot.unwrap_or(dataset.inner.states.n_slots);
        let sample = dataset.inner.sample(end).map_err(to_py)?;
        let preds = predict::predict_window(&self.inner, &dataset.inner, &sample).map_err(to_py)?;
        Ok(preds.into_iter().map(|p| (p.link, p.t_next, p.d_next)).collect())
    }
}

/// Historical Average metrics on a split.
#[pyfunction]
#[pyo3(signature = (dataset, split_name = "test"))]
fn baseline_ha<'py>(py: Python<'py>, dataset: &PyDataset, split_name: &str) -> PyResult<Bound<'py, PyDict>> {
    let r = predict::baseline_ha(&dataset.inner, split(split_name)?).map_err(to_py)?;
    report(py, &r)
}

/// Median waiting time (hours) of a hazard rigged to `Λ(τ) = c·τ`.
#[pyfunction]
fn rigged_median(c: f64) -> PyResult<f64> {
    let mut params = engine::diffmath::ParamSet::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut head = engine::intensity::IntensityHead::new(&mut params, 4, 4, &mut rng).map_err(to_py)?;
    head.rig_linear(&mut params, c, true).map_err(to_py)?;
    predict::predict_time(&head, &params, &[0.0; 4], 0, 0, predict::TAU_MAX_HOURS).map_err(to_py)
}

/// The CLI's property checks as `(name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn selftest(seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let checks = engine::selftest::run_all(seed).map_err(to_py)?;
    Ok(checks.into_iter().map(|c| (c.name.to_string(), c.passed, c.detail)).collect())
}

#[pymodule]
fn stgnpp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySimulation>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_ha, m)?)?;
    m.add_function(wrap_pyfunction!(rigged_median, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
