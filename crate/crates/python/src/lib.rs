//! Python bindings: build, run and train ResTT / TT models from lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use restt::data::Embedded;
use restt::grad::Loss;
use restt::meanfield::{self, ModelKind, Thresholds};
use restt::model::{load_checkpoint, predict, save_checkpoint};
use restt::oracle::expand;
use restt::train::{evaluate, fit, Metrics, Task, TrainSpec};
use restt::{init_params, param_count, Preset, ResTTParams, Topology};

fn py_err(e: restt::Error) -> PyErr {
    match e {
        restt::Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn preset(name: &str) -> PyResult<Preset> {
    match name {
        "restt" => Ok(Preset::GeneralRestt),
        "tt" => Ok(Preset::PlainTt),
        "fc" => Ok(Preset::FullyConnected),
        "volterra" => Ok(Preset::Volterra),
        other => Err(PyValueError::new_err(format!(
            "unknown model '{other}' (restt, tt, fc, volterra)"
        ))),
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    match *m {
        Metrics::Classification { accuracy } => d.set_item("accuracy", accuracy)?,
        Metrics::Regression { rmse, r2 } => {
            d.set_item("rmse", rmse)?;
            d.set_item("r2", r2)?;
        }
    }
    Ok(d)
}

/// Targets are floats (regression, one per sample or one list per sample)
/// or ints (class labels, one-hot over `output_dim`).
fn embedded(xs: Vec<Vec<Vec<f64>>>, ys: &Bound<'_, PyAny>, task: Task, output_dim: usize) -> PyResult<Embedded> {
    let (targets, labels) = match task {
        Task::Classification => {
            let labels: Vec<usize> = ys.extract()?;
            if let Some(bad) = labels.iter().find(|&&l| l >= output_dim) {
                return Err(PyValueError::new_err(format!("label {bad} >= output_dim {output_dim}")));
            }
            let t = labels
                .iter()
                .map(|&l| {
                    let mut v = vec![0.0; output_dim];
                    v[l] = 1.0;
                    v
                })
                .collect();
            (t, Some(labels))
        }
        Task::Regression => match ys.extract::<Vec<f64>>() {
            Ok(v) => (v.into_iter().map(|y| vec![y]).collect(), None),
            Err(_) => (ys.extract::<Vec<Vec<f64>>>()?, None),
        },
    };
    if targets.len() != xs.len() {
        return Err(PyValueError::new_err(format!(
            "{} samples but {} targets",
            xs.len(),
            targets.len()
        )));
    }
    Ok(Embedded {
        xs,
        targets,
        labels,
        clamped: 0,
    })
}

#[pyclass(name = "Model")]
struct PyModel {
    topology: Topology,
    params: ResTTParams,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (input_dims, rank, output_dim, model = "restt", sigma_w2 = 1.0, seed = 0))]
    fn new(input_dims: Vec<usize>, rank: usize, output_dim: usize, model: &str, sigma_w2: f64, seed: u64) -> PyResult<Self> {
        let topology = Topology::preset(preset(model)?, input_dims, rank, output_dim).map_err(py_err)?;
        let params = init_params(&topology, sigma_w2, seed).map_err(py_err)?;
        Ok(Self { topology, params })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (topology, params) = load_checkpoint(path).map_err(py_err)?;
        Ok(Self { topology, params })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &self.topology, &self.params).map_err(py_err)
    }

    #[getter]
    fn input_dims(&self) -> Vec<usize> {
        self.topology.input_dims.clone()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.topology.output_dim
    }

    fn param_count(&self) -> usize {
        param_count(&self.topology).chain_convention
    }

    /// One sample: a list of node vectors.
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        predict(&self.params, &self.topology, &x).map_err(py_err)
    }

    fn predict(&self, xs: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        xs.iter()
            .map(|x| predict(&self.params, &self.topology, x).map_err(py_err))
            .collect()
    }

    /// Monomial expansion as text; small models only.
    fn expand(&self) -> PyResult<String> {
        Ok(expand(&self.params, &self.topology).map_err(py_err)?.to_text())
    }

    #[pyo3(signature = (xs, ys, task = "regression", lr = None, epochs = 100, batch_size = 512, weight_decay = 1e-6, loss = None, shuffle_seed = 0, eval_xs = None, eval_ys = None))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        xs: Vec<Vec<Vec<f64>>>,
        ys: &Bound<'py, PyAny>,
        task: &str,
        lr: Option<f64>,
        epochs: usize,
        batch_size: usize,
        weight_decay: f64,
        loss: Option<&str>,
        shuffle_seed: u64,
        eval_xs: Option<Vec<Vec<Vec<f64>>>>,
        eval_ys: Option<Bound<'py, PyAny>>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let task = Task::parse(task).map_err(py_err)?;
        let loss = match loss {
            Some(l) => Loss::parse(l).map_err(py_err)?,
            None => task.default_loss(),
        };
        let lr = lr.unwrap_or(match task {
            Task::Classification => 1e-3,
            Task::Regression => 1e-2,
        });
        let mut spec = TrainSpec::new(lr, loss);
        spec.epochs = epochs;
        spec.batch_size = batch_size;
        spec.weight_decay = weight_decay;
        spec.shuffle_seed = shuffle_seed;
        let o = self.topology.output_dim;
        let train = embedded(xs, ys, task, o)?;
        let eval = match (eval_xs, eval_ys) {
            (Some(x), Some(y)) => Some(embedded(x, &y, task, o)?),
            (None, None) => None,
            _ => return Err(PyValueError::new_err("eval_xs and eval_ys go together")),
        };
        let (topo, params) = (&self.topology, &mut self.params);
        let log = py
            .allow_threads(|| fit(params, topo, &train, eval.as_ref(), task, &spec))
            .map_err(py_err)?;
        log.rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("train_loss", r.train_loss)?;
                if let Some(m) = &r.eval {
                    d.set_item("eval", metrics_dict(py, m)?)?;
                }
                Ok(d)
            })
            .collect()
    }

    #[pyo3(signature = (xs, ys, task = "regression"))]
    fn evaluate<'py>(&self, py: Python<'py>, xs: Vec<Vec<Vec<f64>>>, ys: &Bound<'py, PyAny>, task: &str) -> PyResult<Bound<'py, PyDict>> {
        let task = Task::parse(task).map_err(py_err)?;
        let data = embedded(xs, ys, task, self.topology.output_dim)?;
        let m = evaluate(&self.params, &self.topology, &data, task).map_err(py_err)?;
        metrics_dict(py, &m)
    }
}

/// Initialization variance from per-node input second moments.
#[pyfunction]
fn recommend_sigma(model: &str, input_stats: Vec<f64>) -> PyResult<f64> {
    let kind = ModelKind::of(&Topology::uniform(preset(model)?, 2, 1, 1, 1).map_err(py_err)?).map_err(py_err)?;
    meanfield::recommend_sigma(kind, &input_stats).map_err(py_err)
}

/// Monte Carlo signal-propagation probe over unit-norm inputs.
#[pyfunction]
#[pyo3(signature = (model = "tt", nodes = 20, input_dim = 2, rank = 10, sigma_w2 = 1.0, trials = 1000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn probe_meanfield<'py>(
    py: Python<'py>,
    model: &str,
    nodes: usize,
    input_dim: usize,
    rank: usize,
    sigma_w2: f64,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let topo = Topology::uniform(preset(model)?, nodes, input_dim, rank, 1).map_err(py_err)?;
    ModelKind::of(&topo).map_err(py_err)?;
    let rep = py
        .allow_threads(|| meanfield::measure(&topo, sigma_w2, meanfield::unit_norm_sampler(nodes), trials, seed))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("verdict", rep.predicted.verdict(&Thresholds::default()).as_str())?;
    d.set_item("q_predicted", rep.predicted.q.clone())?;
    d.set_item("q_measured", rep.q_measured.clone())?;
    d.set_item("chi_predicted", rep.predicted.chi.clone())?;
    d.set_item("chi_measured", rep.chi_measured.clone())?;
    d.set_item("end_to_end_predicted", rep.end_to_end_predicted())?;
    d.set_item("end_to_end_measured", rep.end_to_end_measured)?;
    Ok(d)
}

#[pymodule]
fn restt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(recommend_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(probe_meanfield, m)?)?;
    Ok(())
}
