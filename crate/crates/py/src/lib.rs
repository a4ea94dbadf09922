//! Python bindings: configuration, synthetic data, two-phase training,
//! evaluation, inference, the gradient suite and the metric primitives.
//!
//! Images cross the boundary as flat `H*W*3` lists of floats in `[0, 1]`
//! and masks as flat `H*W` lists of `0`/`1`.

use std::path::PathBuf;

use polyseg::data::{load_dataset, synth_generate, write_dataset, Image, SyntheticConfig};
use polyseg::gradcheck::{run_suite, SuiteScale};
use polyseg::metrics::{confusion, curves as compute_curves, image_metrics, tversky_index as tversky, TverskyParams};
use polyseg::train::config::KEYS;
use polyseg::train::{evaluate, evaluate_oracle, infer_file, infer_image, prepare_data, train_two_phase};
use polyseg::train::{Checkpoint, EpochRecord, Evaluation, RunLog, TrainConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyTuple};

fn to_py(e: polyseg::Error) -> PyErr {
    use polyseg::Error as E;
    match e {
        E::Io(_) | E::Read { .. } | E::Decode { .. } => PyIOError::new_err(e.to_string()),
        E::Config(_) | E::InvalidArgument(_) | E::Shape { .. } | E::Checkpoint(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Training configuration. Keyword arguments override the defaults using
/// the same keys as the config file, e.g. `Config(side=32, base_width=4)`.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = TrainConfig::default();
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                inner.set(&key, &v.str()?.to_string().to_lowercase()).map_err(to_py)?;
            }
        }
        inner.validate().map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: TrainConfig::parse(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        KEYS.to_vec()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(side={}, base_width={}, lr={})", self.inner.side, self.inner.base_width, self.inner.lr)
    }
}

/// Trained network weights plus the configuration they were built with.
#[pyclass(name = "Model")]
struct PyModel {
    inner: polyseg::train::Model,
    checkpoint: Checkpoint,
}

impl PyModel {
    fn from_checkpoint(checkpoint: Checkpoint) -> PyResult<Self> {
        let inner = polyseg::train::Model::from_checkpoint(&checkpoint).map_err(to_py)?;
        Ok(PyModel { inner, checkpoint })
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::from_checkpoint(Checkpoint::load(&path).map_err(to_py)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.checkpoint.save(&path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.inner.config.clone() }
    }

    #[getter]
    fn best_mdice(&self) -> f64 {
        self.checkpoint.best_mdice
    }

    /// Metric report (and curve summary) on every pair in `data`.
    #[pyo3(signature = (data, threshold=None))]
    fn evaluate<'py>(&self, py: Python<'py>, data: PathBuf, threshold: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
        let samples = load_dataset(&data).map_err(to_py)?.samples;
        let ev = evaluate(&self.inner, &samples, threshold.unwrap_or(self.inner.config.threshold)).map_err(to_py)?;
        evaluation_dict(py, &ev)
    }

    /// Binary mask (and attention map in `0..=255`) at the image's resolution.
    #[pyo3(signature = (pixels, height, width, threshold=None))]
    fn segment(&self, pixels: Vec<f32>, height: usize, width: usize, threshold: Option<f64>) -> PyResult<(Vec<u8>, Option<Vec<u8>>)> {
        let image = Image::new(height, width, pixels).map_err(to_py)?;
        let out = infer_image(&self.inner, &image, threshold.unwrap_or(self.inner.config.threshold)).map_err(to_py)?;
        Ok((out.mask.data, out.attention))
    }

    #[pyo3(signature = (input, output, threshold=None, attention=None))]
    fn infer(&self, input: PathBuf, output: PathBuf, threshold: Option<f64>, attention: Option<PathBuf>) -> PyResult<()> {
        let t = threshold.unwrap_or(self.inner.config.threshold);
        infer_file(&self.inner, &input, &output, t, attention.as_deref()).map_err(to_py)
    }
}

fn epoch_tuple<'py>(py: Python<'py>, r: &EpochRecord) -> PyResult<Bound<'py, PyTuple>> {
    PyTuple::new(py, [r.phase as f64, r.epoch as f64, r.train_loss, r.val_mdice, r.val_miou])
}

fn evaluation_dict<'py>(py: Python<'py>, ev: &Evaluation) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let (m, s) = (&ev.report.mean, &ev.report.std);
    d.set_item("n", ev.report.images.len())?;
    d.set_item("mean", (m.dice, m.iou, m.recall, m.precision))?;
    d.set_item("std", (s.dice, s.iou, s.recall, s.precision))?;
    let per_image: Vec<_> = ev.report.images.iter().map(|r| (r.id.clone(), r.dice, r.iou, r.recall, r.precision)).collect();
    d.set_item("images", per_image)?;
    if let Some(c) = &ev.curves {
        d.set_item("auc", c.auc)?;
        d.set_item("map", c.map)?;
    }
    Ok(d)
}

/// Writes `count` synthetic pairs as `images/*.ppm` + `masks/*.pgm`.
#[pyfunction]
#[pyo3(signature = (out, count=200, side=64, seed=0))]
fn synth(out: PathBuf, count: usize, side: usize, seed: u64) -> PyResult<usize> {
    let samples = synth_generate(&SyntheticConfig { count, side, seed, ..Default::default() }).map_err(to_py)?;
    write_dataset(&out, &samples).map_err(to_py)?;
    Ok(samples.len())
}

/// Two-phase training. Returns the best model and the per-epoch records
/// `(phase, epoch, train_loss, val_mdice, val_miou)`.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<(PyModel, Vec<Bound<'py, PyTuple>>)> {
    let cfg = &config.inner;
    let data = prepare_data(cfg).map_err(to_py)?;
    let out = train_two_phase(cfg, &data, RunLog::new(), &mut |_| {}).map_err(to_py)?;
    let epochs = out.log.epochs().map(|r| epoch_tuple(py, r)).collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel::from_checkpoint(out.best)?, epochs))
}

/// Scores the ground-truth masks of `data` against themselves.
#[pyfunction]
#[pyo3(signature = (data, threshold=0.5))]
fn evaluate_ground_truth<'py>(py: Python<'py>, data: PathBuf, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
    let samples = load_dataset(&data).map_err(to_py)?.samples;
    evaluation_dict(py, &evaluate_oracle(&samples, threshold).map_err(to_py)?)
}

/// `(name, max_relative_error, coordinates_checked, passed)` per check.
#[pyfunction]
#[pyo3(signature = (scale="ops"))]
fn gradcheck(scale: &str) -> PyResult<Vec<(String, f64, usize, bool)>> {
    let scale: SuiteScale = scale.parse().map_err(PyValueError::new_err)?;
    let entries = run_suite(scale).map_err(to_py)?;
    Ok(entries.iter().map(|e| (e.name.clone(), e.report.max_rel_error, e.report.checked, e.passed())).collect())
}

/// `(dice, iou, recall, precision)` of one prediction against a binary mask.
#[pyfunction]
#[pyo3(signature = (prediction, truth, threshold=0.5))]
fn metrics(prediction: Vec<f64>, truth: Vec<u8>, threshold: f64) -> PyResult<(f64, f64, f64, f64)> {
    let m = image_metrics(&confusion(&prediction, &truth, threshold).map_err(to_py)?);
    Ok((m.dice, m.iou, m.recall, m.precision))
}

/// `(auc, map, roc_points, pr_points)` over pooled pixel scores.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn curves(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<(f64, f64, Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let c = compute_curves(&scores, &labels).map_err(to_py)?;
    Ok((c.auc, c.map, c.roc, c.pr))
}

#[pyfunction]
#[pyo3(signature = (p, g, alpha=0.3, beta=0.7, smooth=1e-6))]
fn tversky_index(p: Vec<f64>, g: Vec<f64>, alpha: f64, beta: f64, smooth: f64) -> PyResult<f64> {
    tversky(&p, &g, &TverskyParams { alpha, beta, smooth }).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "polyseg")]
fn polyseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(curves, m)?)?;
    m.add_function(wrap_pyfunction!(tversky_index, m)?)?;
    Ok(())
}
