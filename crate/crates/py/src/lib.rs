//! Python bindings: networks, datasets, training, certification, metrics.
//!
//! Structured results (certificates, metrics, history) cross the boundary
//! as plain dicts/lists converted from their serde representation.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::IntoPyObjectExt;
use pyo3::types::{PyDict, PyList};

use gloro::certify::{AffinityCollection, Guarantee};
use gloro::data::{self, LabeledDataset};
use gloro::error::GloroError;
use gloro::lipschitz::{converged_bounds, BoundMode};
use gloro::net::Network;
use gloro::train::{self, LossKind, LrSchedule, ScheduleShape, TradesSchedule, TrainConfig};

fn err(e: GloroError) -> PyErr {
    match e {
        GloroError::InvalidArgument(_) | GloroError::Config(_) | GloroError::ShapeMismatch(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// serde_json -> Python object, for returning structured results.
fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_py_any(py)?,
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)?
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)?
            }
        }
        serde_json::Value::String(s) => s.into_py_any(py)?,
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)?
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_py_any(py)?
        }
    })
}

fn to_py_json<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn build_guarantee(
    name: &str,
    k: usize,
    affinity_sets: Option<Vec<Vec<usize>>>,
    num_classes: usize,
) -> PyResult<Guarantee> {
    match name {
        "standard" => Ok(Guarantee::Standard),
        "rtk" => Ok(Guarantee::Rtk { k }),
        "affinity" => {
            let sets = affinity_sets.ok_or_else(|| {
                PyValueError::new_err("affinity guarantee requires affinity_sets")
            })?;
            Ok(Guarantee::Affinity(
                AffinityCollection::new(num_classes, sets).map_err(err)?,
            ))
        }
        other => Err(PyValueError::new_err(format!(
            "unknown guarantee {other:?} (expected standard, rtk, or affinity)"
        ))),
    }
}

#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (seed, n_per_class, overlap))]
    fn synthetic_2d(seed: u64, n_per_class: usize, overlap: f64) -> Self {
        PyDataset { inner: data::gen_synthetic_2d(seed, n_per_class, overlap) }
    }

    #[staticmethod]
    #[pyo3(signature = (seed, n, dims=5))]
    fn acas_synthetic(seed: u64, n: usize, dims: usize) -> PyResult<Self> {
        let ranges = vec![(0.0, 1.0); dims];
        Ok(PyDataset { inner: data::gen_acas_synthetic(seed, n, dims, &ranges).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: LabeledDataset::load_csv(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_csv(&path).map_err(err)
    }

    #[getter]
    fn points(&self) -> Vec<Vec<f64>> {
        self.inner.points.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// (min inter-class distance, suggested eps = half of it).
    fn estimate_separation(&self) -> PyResult<(f64, f64)> {
        let s = data::estimate_separation(&self.inner).map_err(err)?;
        Ok((s.min_interclass_distance, s.suggested_eps))
    }
}

#[pyclass(name = "Network")]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork { inner: Network::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&x).map_err(err)
    }

    fn predict_topk(&self, x: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
        let logits = self.inner.forward(&x).map_err(err)?;
        gloro::net::predict_topk(&logits, k).map_err(err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn metadata(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_json(py, &self.inner.metadata)
    }

    /// Certify one point; returns the full certificate record as a dict.
    #[pyo3(signature = (x, eps, guarantee="standard", k=2, affinity_sets=None))]
    fn certify(
        &self,
        py: Python<'_>,
        x: Vec<f64>,
        eps: f64,
        guarantee: &str,
        k: usize,
        affinity_sets: Option<Vec<Vec<usize>>>,
    ) -> PyResult<Py<PyAny>> {
        let g = build_guarantee(guarantee, k, affinity_sets, self.inner.num_classes)?;
        let seed = self.inner.metadata.power_seed.unwrap_or(0);
        let bounds = converged_bounds(&self.inner, seed, BoundMode::Pairwise).map_err(err)?;
        let res = gloro::certify::certify_point(&self.inner, &bounds, eps, &g, &x).map_err(err)?;
        to_py_json(py, &res)
    }

    /// VRA / rejection / clean-accuracy metrics over a dataset.
    #[pyo3(signature = (dataset, eps, guarantee="standard", k=2, affinity_sets=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        eps: f64,
        guarantee: &str,
        k: usize,
        affinity_sets: Option<Vec<Vec<usize>>>,
    ) -> PyResult<Py<PyAny>> {
        let g = build_guarantee(guarantee, k, affinity_sets, self.inner.num_classes)?;
        let seed = self.inner.metadata.power_seed.unwrap_or(0);
        let bounds = converged_bounds(&self.inner, seed, BoundMode::Pairwise).map_err(err)?;
        let results: Result<Vec<_>, _> = dataset
            .inner
            .points
            .iter()
            .map(|x| gloro::certify::certify_point(&self.inner, &bounds, eps, &g, x))
            .collect();
        let results = results.map_err(err)?;
        let logits: Result<Vec<_>, _> =
            dataset.inner.points.iter().map(|x| self.inner.forward(x)).collect();
        let report = gloro::eval::report(&results, &dataset.inner.labels, &logits.map_err(err)?, &g, eps)
            .map_err(err)?;
        to_py_json(py, &report)
    }
}

/// Train a dense min-max network against the requested certified head.
/// Returns (network, history) with the history as a list of dicts.
#[pyfunction]
#[pyo3(signature = (dataset, eps, guarantee="standard", k=2, affinity_sets=None,
                    hidden=vec![32, 32], epochs=30, batch_size=64, seed=0,
                    lr_start=1e-3, lr_end=1e-6, trades_lambda=None))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    py: Python<'_>,
    dataset: &PyDataset,
    eps: f64,
    guarantee: &str,
    k: usize,
    affinity_sets: Option<Vec<Vec<usize>>>,
    hidden: Vec<usize>,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    lr_start: f64,
    lr_end: f64,
    trades_lambda: Option<f64>,
) -> PyResult<(PyNetwork, Py<PyAny>)> {
    let g = build_guarantee(guarantee, k, affinity_sets, dataset.inner.num_classes())?;
    let config = TrainConfig {
        epochs,
        batch_size,
        lr: LrSchedule { start: lr_start, end: lr_end, decay_onset: 0.5 },
        loss: match trades_lambda {
            None => LossKind::CrossEntropy,
            Some(l) => LossKind::Trades(TradesSchedule {
                start: l,
                end: l,
                shape: ScheduleShape::Linear,
                onset: 1.0,
            }),
        },
        power_iters: 2,
        eps,
        guarantee: g,
        seed,
        eval_every: None,
    };
    let net = train::init_dense_net(dataset.inner.dim(), &hidden, dataset.inner.num_classes(), seed);
    let out = train::train(net, &dataset.inner, &config).map_err(err)?;
    let history = to_py_json(py, &out.history)?;
    Ok((PyNetwork { inner: out.net }, history))
}

/// Parse an affinity config text into a list of class-index sets.
#[pyfunction]
fn parse_affinity(text: &str, class_names: Vec<String>) -> PyResult<Vec<Vec<usize>>> {
    Ok(data::parse_affinity_config(text, &class_names).map_err(err)?.sets)
}

#[pymodule]
fn gloro_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(parse_affinity, m)?)?;
    Ok(())
}
