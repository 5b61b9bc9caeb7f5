//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use gnnflock::gsp::{apply_filter, build_disk_graph, FilterTaps, GraphSignal, ShiftOperator};
use gnnflock::harness::{self, SplitCounts};
use gnnflock::sim::{self, ExpertPolicy, SwarmState};
use gnnflock::train::predict_along;
use gnnflock::{io, ArchHyper, ArchKind, Error};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyString};

type Rows = Vec<Vec<f64>>;

/// `(step, epoch, train_mse, val_cost)`
type LogRows = Vec<(usize, usize, f64, Option<f64>)>;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Rows) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Rows {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn apply_kwargs<T: pyo3::PyClass>(obj: Py<T>, py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Py<T>> {
    if let Some(kw) = kwargs {
        for (k, v) in kw {
            obj.bind(py).as_any().setattr(k.cast_into::<PyString>()?, v)?;
        }
    }
    Ok(obj)
}

#[pyclass(name = "FlockingConfig", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PyFlockingConfig {
    agents: usize,
    sampling_time: f64,
    duration: f64,
    comm_radius: f64,
    ca_radius: f64,
    max_accel: f64,
    init_velocity_max: f64,
    bias_max: f64,
    min_init_distance: f64,
}

impl From<sim::FlockingConfig> for PyFlockingConfig {
    fn from(c: sim::FlockingConfig) -> Self {
        Self {
            agents: c.agents,
            sampling_time: c.sampling_time,
            duration: c.duration,
            comm_radius: c.comm_radius,
            ca_radius: c.ca_radius,
            max_accel: c.max_accel,
            init_velocity_max: c.init_velocity_max,
            bias_max: c.bias_max,
            min_init_distance: c.min_init_distance,
        }
    }
}

impl PyFlockingConfig {
    fn inner(&self) -> PyResult<sim::FlockingConfig> {
        let c = sim::FlockingConfig {
            agents: self.agents,
            sampling_time: self.sampling_time,
            duration: self.duration,
            comm_radius: self.comm_radius,
            ca_radius: self.ca_radius,
            max_accel: self.max_accel,
            init_velocity_max: self.init_velocity_max,
            bias_max: self.bias_max,
            min_init_distance: self.min_init_distance,
        };
        c.validate().map_err(err)?;
        Ok(c)
    }
}

#[pymethods]
impl PyFlockingConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Py<Self>> {
        apply_kwargs(Py::new(py, Self::from(sim::FlockingConfig::default()))?, py, kwargs)
    }

    fn steps(&self) -> PyResult<usize> {
        Ok(self.inner()?.steps())
    }

    fn __repr__(&self) -> PyResult<String> {
        Ok(format!(
            "FlockingConfig({})",
            self.inner()?.canonical().trim().replace('\n', ", ")
        ))
    }
}

#[pyclass(name = "TrainConfig", get_all, set_all, from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    validate_every: usize,
    seed: u64,
    max_loss: f64,
    wall_budget: Option<f64>,
}

impl From<gnnflock::TrainConfig> for PyTrainConfig {
    fn from(c: gnnflock::TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            validate_every: c.validate_every,
            seed: c.seed,
            max_loss: c.max_loss,
            wall_budget: c.wall_budget,
        }
    }
}

impl PyTrainConfig {
    fn inner(&self) -> PyResult<gnnflock::TrainConfig> {
        let c = gnnflock::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            validate_every: self.validate_every,
            seed: self.seed,
            max_loss: self.max_loss,
            wall_budget: self.wall_budget,
        };
        c.validate().map_err(err)?;
        Ok(c)
    }
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Py<Self>> {
        apply_kwargs(Py::new(py, Self::from(gnnflock::TrainConfig::default()))?, py, kwargs)
    }
}

/// Trained or freshly initialized controller parameters.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: gnnflock::ModelParams,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (arch, hidden, k, seed = 0))]
    fn new(arch: &str, hidden: usize, k: usize, seed: u64) -> PyResult<Self> {
        let kind: ArchKind = arch.parse().map_err(err)?;
        let inner = gnnflock::init_params(&ArchHyper::flocking(kind, hidden, k), seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_checkpoint(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.hyper().kind.to_string()
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.hyper().hidden
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.hyper().k
    }

    fn param_count(&self) -> usize {
        gnnflock::param_count(self.inner.hyper())
    }

    fn parameters(&self) -> Vec<f64> {
        self.inner.flatten()
    }

    /// Actions along the recorded graphs and features of a trajectory.
    fn predict(&self, traj: &PyTrajectory) -> PyResult<Vec<Rows>> {
        let out = predict_along(&self.inner, &traj.inner).map_err(err)?;
        Ok(out.iter().map(|u| rows(u.data())).collect())
    }

    /// Closed-loop rollout from the initial state drawn with `seed`.
    fn rollout(&self, cfg: &PyFlockingConfig, seed: u64) -> PyResult<PyTrajectory> {
        let cfg = cfg.inner()?;
        let init = sim::sample_initial_conditions(&cfg, seed).map_err(err)?;
        let mut policy = gnnflock::GnnPolicy::new(self.inner.clone());
        Ok(PyTrajectory {
            inner: sim::rollout(&mut policy, &init, &cfg),
        })
    }

    fn __repr__(&self) -> String {
        let h = self.inner.hyper();
        format!("Model(arch={}, hidden={}, k={})", h.kind, h.hidden, h.k)
    }
}

#[pyclass(name = "Trajectory", frozen)]
struct PyTrajectory {
    inner: gnnflock::Trajectory,
}

impl PyTrajectory {
    fn step(&self, t: usize) -> PyResult<&sim::TrajectoryStep> {
        self.inner
            .steps
            .get(t)
            .ok_or_else(|| PyIndexError::new_err(format!("step {t} out of range")))
    }
}

#[pymethods]
impl PyTrajectory {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn agents(&self) -> usize {
        self.inner.agents()
    }

    #[getter]
    fn failed(&self) -> bool {
        self.inner.failed()
    }

    fn cumulative_cost(&self) -> f64 {
        self.inner.cumulative_cost()
    }

    fn costs(&self) -> Vec<f64> {
        self.inner.steps.iter().map(|s| s.cost).collect()
    }

    fn positions(&self, t: usize) -> PyResult<Rows> {
        Ok(rows(&self.step(t)?.state.positions))
    }

    fn velocities(&self, t: usize) -> PyResult<Rows> {
        Ok(rows(&self.step(t)?.state.velocities))
    }

    fn features(&self, t: usize) -> PyResult<Rows> {
        Ok(rows(self.step(t)?.features.data()))
    }

    fn actions(&self, t: usize) -> PyResult<Rows> {
        Ok(rows(self.step(t)?.actions.data()))
    }

    fn edges(&self, t: usize) -> PyResult<Vec<(u32, u32)>> {
        Ok(self.step(t)?.edges.clone())
    }
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: gnnflock::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_dataset(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_dataset(&path, &self.inner).map_err(err)
    }

    /// Sizes of the train, validation and test splits.
    fn sizes(&self) -> (usize, usize, usize) {
        let d = &self.inner;
        (d.train.len(), d.validation.len(), d.test.len())
    }

    fn trajectory(&self, split: &str, i: usize) -> PyResult<PyTrajectory> {
        let d = &self.inner;
        let v = match split {
            "train" => &d.train,
            "validation" => &d.validation,
            "test" => &d.test,
            _ => return Err(PyValueError::new_err(format!("unknown split `{split}`"))),
        };
        let t = v
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("{split}[{i}] out of range")))?;
        Ok(PyTrajectory { inner: t.clone() })
    }
}

/// Initial positions and velocities.
#[pyfunction]
fn sample_initial_conditions(cfg: &PyFlockingConfig, seed: u64) -> PyResult<(Rows, Rows)> {
    let s = sim::sample_initial_conditions(&cfg.inner()?, seed).map_err(err)?;
    Ok((rows(&s.positions), rows(&s.velocities)))
}

#[pyfunction]
fn expert_action(cfg: &PyFlockingConfig, positions: Rows, velocities: Rows) -> PyResult<Rows> {
    let state = SwarmState::new(matrix(positions)?, matrix(velocities)?).map_err(err)?;
    let u = sim::expert_action(&state, &cfg.inner()?).map_err(err)?;
    Ok(rows(u.data()))
}

#[pyfunction]
fn expert_rollout(cfg: &PyFlockingConfig, seed: u64) -> PyResult<PyTrajectory> {
    let cfg = cfg.inner()?;
    let init = sim::sample_initial_conditions(&cfg, seed).map_err(err)?;
    Ok(PyTrajectory {
        inner: sim::rollout(&mut ExpertPolicy::new(&cfg), &init, &cfg),
    })
}

/// Binary adjacency of the disk graph.
#[pyfunction]
fn disk_graph(positions: Rows, radius: f64) -> PyResult<Rows> {
    let s = build_disk_graph(matrix(positions)?.view(), radius).map_err(err)?;
    Ok(rows(s.matrix()))
}

/// `sum_k S^k X H_k`.
#[pyfunction]
fn graph_filter(adjacency: Rows, x: Rows, taps: Vec<Rows>) -> PyResult<Rows> {
    let s = ShiftOperator::from_matrix(matrix(adjacency)?).map_err(err)?;
    let x = GraphSignal::new(matrix(x)?).map_err(err)?;
    let h = FilterTaps::new(taps.into_iter().map(matrix).collect::<PyResult<_>>()?).map_err(err)?;
    Ok(rows(apply_filter(&s, &x, &h).map_err(err)?.data()))
}

#[pyfunction]
#[pyo3(signature = (cfg, train, validation, test, seed = 0))]
fn generate_dataset(
    py: Python<'_>,
    cfg: &PyFlockingConfig,
    train: usize,
    validation: usize,
    test: usize,
    seed: u64,
) -> PyResult<PyDataset> {
    let cfg = cfg.inner()?;
    let counts = SplitCounts {
        train,
        validation,
        test,
    };
    let inner = py
        .detach(|| harness::generate_dataset(&cfg, counts, seed))
        .map_err(err)?;
    Ok(PyDataset { inner })
}

/// Trains a model by imitation; returns the best model and the training log
/// as `(step, epoch, train_mse, val_cost)` rows.
#[pyfunction]
#[pyo3(signature = (dataset, arch, hidden, k, cfg = None))]
fn train(
    py: Python<'_>,
    dataset: &PyDataset,
    arch: &str,
    hidden: usize,
    k: usize,
    cfg: Option<&PyTrainConfig>,
) -> PyResult<(PyModel, LogRows)> {
    let kind: ArchKind = arch.parse().map_err(err)?;
    let cfg = match cfg {
        Some(c) => c.inner()?,
        None => gnnflock::TrainConfig::default(),
    };
    let hyper = ArchHyper::flocking(kind, hidden, k);
    let outcome = py
        .detach(|| gnnflock::train_imitation(&dataset.inner, &hyper, &cfg))
        .map_err(err)?;
    let log = outcome
        .log
        .iter()
        .map(|r| (r.step, r.epoch, r.train_mse, r.val_cost))
        .collect();
    Ok((PyModel { inner: outcome.best }, log))
}

/// Cost of the model relative to the expert over `count` fresh initial
/// states; returns `(mean, std, failures)`.
#[pyfunction]
#[pyo3(signature = (model, cfg, count = 20, seed = 0))]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    cfg: &PyFlockingConfig,
    count: usize,
    seed: u64,
) -> PyResult<(f64, f64, usize)> {
    let cfg = cfg.inner()?;
    let inits = harness::sample_test_states(&cfg, count, seed).map_err(err)?;
    let s = py.detach(|| harness::evaluate_policy(&model.inner, &inits, &cfg));
    Ok((s.mean, s.std, s.failures))
}

#[pymodule]
#[pyo3(name = "gnnflock")]
fn gnnflock_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFlockingConfig>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(sample_initial_conditions, m)?)?;
    m.add_function(wrap_pyfunction!(expert_action, m)?)?;
    m.add_function(wrap_pyfunction!(expert_rollout, m)?)?;
    m.add_function(wrap_pyfunction!(disk_graph, m)?)?;
    m.add_function(wrap_pyfunction!(graph_filter, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
