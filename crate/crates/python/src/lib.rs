//! Python module `intensivenet`: CTC utilities, the gradient-check suite,
//! presets and checkpoint inference.

use std::path::PathBuf;

use ::intensivenet::cli::{ctc_oracle as run_oracle, Preset};
use ::intensivenet::ctc::{self, FrameProbs, LabelSequence};
use ::intensivenet::gradcheck::{run_suite, SuiteSize};
use ::intensivenet::model::{Model, Task};
use ::intensivenet::tensor::{Shape, Tensor};
use ::intensivenet::{checkpoint, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Checkpoint(_) | Error::Idx(_) => {
            PyIOError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn frame_probs(rows: Vec<Vec<f64>>) -> PyResult<FrameProbs> {
    let classes = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != classes) {
        return Err(PyValueError::new_err(
            "all frames need the same number of classes",
        ));
    }
    let frames = rows.len();
    FrameProbs::new(frames, classes, rows.into_iter().flatten().collect()).map_err(py_err)
}

/// CTC negative log-likelihood of `target` (labels ≥ 1, blank is 0) under
/// per-frame distributions `probs`; returns `(loss, d loss / d logits)`.
#[pyfunction]
pub fn ctc_loss(probs: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let probs = frame_probs(probs)?;
    let target = LabelSequence::new(target).map_err(py_err)?;
    let out = ctc::ctc_loss(&probs, &target).map_err(py_err)?;
    let grad = out
        .grad
        .chunks(probs.classes())
        .map(<[f64]>::to_vec)
        .collect();
    Ok((out.loss, grad))
}

/// The same quantity by enumerating every alignment path.
#[pyfunction]
pub fn ctc_bruteforce(probs: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<f64> {
    let probs = frame_probs(probs)?;
    let target = LabelSequence::new(target).map_err(py_err)?;
    ctc::ctc_bruteforce(&probs, &target).map_err(py_err)
}

#[pyfunction]
pub fn greedy_decode(probs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(ctc::greedy_decode(&frame_probs(probs)?).labels().to_vec())
}

/// Runs the finite-difference suite; returns `(component, max relative
/// error, passed)` triples.
#[pyfunction]
#[pyo3(signature = (size = "tiny"))]
fn gradcheck(size: &str) -> PyResult<Vec<(String, f64, bool)>> {
    let size: SuiteSize = size.parse().map_err(py_err)?;
    let results = run_suite(size, false).map_err(py_err)?;
    Ok(results
        .into_iter()
        .map(|r| (r.component, r.max_rel_error, r.pass))
        .collect())
}

/// Worst log-space disagreement between the CTC recursion and brute force
/// over the grid; returns `(cases, worst deviation, passed)`.
#[pyfunction]
pub fn ctc_oracle(tmax: usize, alphabet: usize) -> PyResult<(usize, f64, bool)> {
    let r = run_oracle(tmax, alphabet).map_err(py_err)?;
    Ok((r.cases, r.worst_log_deviation, r.pass))
}

fn parse_preset(name: &str) -> PyResult<Preset> {
    match name {
        "mnist" => Ok(Preset::Mnist),
        "digitlines" => Ok(Preset::Digitlines),
        other => Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    }
}

/// A built-in run configuration as JSON.
#[pyfunction]
pub fn preset(name: &str) -> PyResult<String> {
    serde_json::to_string_pretty(&parse_preset(name)?.config())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Model", module = "intensivenet")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint directory (one containing `manifest.json`).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = checkpoint::load_checkpoint(&path).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    /// A freshly initialized model of a preset's architecture.
    #[staticmethod]
    fn from_preset(name: &str) -> PyResult<Self> {
        let inner = Model::new(parse_preset(name)?.config().model).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    /// `(height, width, channels)` expected by `predict`.
    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.config.input;
        (s.height, s.width, s.channels)
    }

    #[getter]
    fn task(&self) -> &'static str {
        match self.inner.config.task {
            Task::Classify { .. } => "classify",
            Task::Sequence { .. } => "sequence",
        }
    }

    fn count_parameters(&self) -> usize {
        self.inner.count_parameters()
    }

    /// Predicts each image, given row-major pixels in `[0, 1]`; returns the
    /// class digit or decoded digit string per image.
    fn predict(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<String>> {
        let (h, w, c) = self.input_shape();
        if images.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = images.iter().position(|im| im.len() != h * w * c) {
            return Err(PyValueError::new_err(format!(
                "image {bad} has {} values, expected {h}x{w}x{c}",
                images[bad].len()
            )));
        }
        let shape = Shape::new(images.len(), h, w, c).map_err(py_err)?;
        let x = Tensor::new(shape, images.into_iter().flatten().collect()).map_err(py_err)?;
        match self.inner.config.task {
            Task::Classify { .. } => Ok(self
                .inner
                .predict_classify(&x)
                .map_err(py_err)?
                .into_iter()
                .map(|k| k.to_string())
                .collect()),
            Task::Sequence { .. } => Ok(self
                .inner
                .predict_sequence(&x)
                .map_err(py_err)?
                .iter()
                .map(LabelSequence::to_digit_string)
                .collect()),
        }
    }
}

#[pymodule]
#[pyo3(name = "intensivenet")]
fn intensivenet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_bruteforce, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
