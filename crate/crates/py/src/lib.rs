//! Python bindings. Matrices cross the boundary as lists of rows.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use ::mccl as core;
use core::checkpoint::Checkpoint;
use core::config::RunConfig;
use core::cpi::PrototypeBank;
use core::data::{LabelMode, PatchFeatureMap};
use core::metrics::MetricsReport;
use core::MccError;

fn to_py(e: MccError) -> PyErr {
    match e {
        MccError::Config(_) | MccError::Parse { .. } => PyValueError::new_err(e.to_string()),
        MccError::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        MccError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn report_dict(r: &MetricsReport) -> HashMap<String, f64> {
    let mut d = HashMap::new();
    d.insert("macro_f1".into(), r.macro_f1);
    d.insert("micro_f1".into(), r.micro_f1);
    d.insert("samples_f1".into(), r.samples_f1);
    d.insert("map".into(), r.map);
    d.insert("accuracy".into(), r.accuracy);
    d.insert("macro_auc".into(), r.macro_auc.unwrap_or(f64::NAN));
    d.insert("threshold".into(), r.threshold);
    d
}

/// Run configuration; keys as in config files (`cpi.k`, `mcc.tau`, ...).
#[pyclass(name = "RunConfig")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_text(text, std::path::Path::new("<python>")).map_err(to_py)?;
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_file(&path).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(k={}, tau={}, lambda={}, epochs={})", self.inner.k, self.inner.tau, self.inner.lambda, self.inner.epochs)
    }
}

/// A loaded dataset split.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: core::data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: core::data::load_dataset(&path).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn label_names(&self) -> Vec<String> {
        self.inner.manifest.label_names.clone()
    }

    fn class_counts(&self) -> Vec<usize> {
        core::data::class_counts(&self.inner)
    }

    fn truth(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.truth_matrix())
    }

    fn patches(&self, index: usize, stage: usize) -> PyResult<Vec<Vec<f64>>> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err("sample index out of range"))?;
        let f = s
            .features_by_stage
            .get(stage)
            .ok_or_else(|| PyValueError::new_err("stage out of range"))?;
        Ok(rows(f.patches()))
    }
}

/// Trained model, prototype bank and optimiser state.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    fn config(&self) -> PyRunConfig {
        PyRunConfig {
            inner: self.inner.config().clone(),
        }
    }

    /// Class probabilities, one row per sample, from the EMA parameters.
    fn predict(&self, data: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        let m = &self.inner.model;
        let p = m.predict(&self.inner.ema.shadow, &self.inner.bank, &data.inner).map_err(to_py)?;
        Ok(rows(&p))
    }

    #[pyo3(signature = (data, threshold = 0.5))]
    fn evaluate(&self, data: &PyDataset, threshold: f64) -> PyResult<HashMap<String, f64>> {
        let r = core::harness::evaluate(&self.inner, &data.inner, threshold).map_err(to_py)?;
        Ok(report_dict(&r))
    }

    /// Per used stage: `(stage, C x K correlation rows, dead prototype indices)`.
    fn analyze(&self, data: &PyDataset) -> PyResult<Vec<(usize, Vec<Vec<f64>>, Vec<usize>)>> {
        let a = core::harness::analyze_prototypes(&self.inner, &data.inner).map_err(to_py)?;
        Ok(a.into_iter().map(|x| (x.stage, rows(&x.correlation), x.dead)).collect())
    }

    fn prototypes(&self, stage: usize) -> PyResult<Vec<Vec<f64>>> {
        let b = &self.inner.bank;
        if stage >= b.num_stages() {
            return Err(PyValueError::new_err("stage out of range"));
        }
        Ok(rows(b.stage(stage)))
    }
}

/// Trains from scratch; `val` is evaluated after every epoch if given.
#[pyfunction]
#[pyo3(signature = (config, train, val = None))]
fn train(py: Python<'_>, config: &PyRunConfig, train: &PyDataset, val: Option<&PyDataset>) -> PyResult<(PyCheckpoint, Vec<String>)> {
    let cfg = config.inner.clone();
    cfg.validate().map_err(to_py)?;
    let out = py
        .detach(|| core::harness::train(&cfg, &train.inner, val.map(|v| &v.inner), None))
        .map_err(to_py)?;
    let log = out.epochs.iter().map(|r| r.log_line()).collect();
    Ok((PyCheckpoint { inner: out.checkpoint }, log))
}

/// Generates train/val/test splits under `out` from a generator spec text.
#[pyfunction]
#[pyo3(signature = (out, spec = ""))]
fn generate_synthetic(out: PathBuf, spec: &str) -> PyResult<Vec<usize>> {
    let spec = core::data::SyntheticSpec::from_text(spec, std::path::Path::new("<python>")).map_err(to_py)?;
    let data = core::data::generate_synthetic(&spec).map_err(to_py)?;
    let mut sizes = Vec::new();
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        core::data::write_dataset(&out.join(name), split).map_err(to_py)?;
        sizes.push(split.len());
    }
    Ok(sizes)
}

#[pyfunction]
fn allocate_prototypes(counts: Vec<usize>, k: usize) -> PyResult<Vec<usize>> {
    Ok(core::cpi::allocate_prototypes(&counts, k).map_err(to_py)?.budgets().to_vec())
}

/// Soft assignment of patch rows to prototype rows at temperature `tau`.
#[pyfunction]
#[pyo3(signature = (patches, prototypes, tau = 0.1))]
fn soft_assignment(patches: Vec<Vec<f64>>, prototypes: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let x = matrix(patches)?;
    let p = matrix(prototypes)?;
    let k = p.nrows();
    let bank = PrototypeBank::new(vec![p], vec![0; k], core::cpi::DEFAULT_EPSILON, 1.0).map_err(to_py)?;
    let n = x.nrows();
    let fmap = PatchFeatureMap::new(x, (n, 1)).map_err(to_py)?;
    let a = core::mcc::soft_assignment(&fmap, &bank, 0, tau).map_err(to_py)?;
    Ok(rows(&a.weights))
}

#[pyfunction]
#[pyo3(signature = (scores, truth, threshold = 0.5, multi_class = false))]
fn compute_metrics(scores: Vec<Vec<f64>>, truth: Vec<Vec<f64>>, threshold: f64, multi_class: bool) -> PyResult<HashMap<String, f64>> {
    let mode = if multi_class { LabelMode::MultiClass } else { LabelMode::MultiLabel };
    let r = core::metrics::compute_metrics(&matrix(scores)?, &matrix(truth)?, mode, threshold).map_err(to_py)?;
    Ok(report_dict(&r))
}

#[pyfunction]
#[pyo3(signature = (probs, targets, gamma_pos = 0.0, gamma_neg = 2.0))]
fn asymmetric_loss(probs: Vec<f64>, targets: Vec<f64>, gamma_pos: f64, gamma_neg: f64) -> PyResult<f64> {
    if probs.len() != targets.len() {
        return Err(PyValueError::new_err("probs and targets differ in length"));
    }
    Ok(core::metrics::asymmetric_loss(&probs, &targets, gamma_pos, gamma_neg))
}

#[pymodule]
fn mccl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(allocate_prototypes, m)?)?;
    m.add_function(wrap_pyfunction!(soft_assignment, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(asymmetric_loss, m)?)?;
    Ok(())
}
