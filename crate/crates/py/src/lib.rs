//! Python bindings. Boxes are `[x1, y1, x2, y2]` integer lists; structured
//! records (ground truth, predictions, logs, reports) cross as plain
//! dicts and lists.

// pyo3's macro expansion trips this lint on every PyResult return
#![allow(clippy::useless_conversion)]

use std::collections::BTreeMap;

use kvg_core::evaluation::{EvalConfig, GroundTruth, Prediction};
use kvg_core::filtering::Verdict;
use kvg_core::geometry::{AffineTransform, CoordSpace};
use kvg_core::grpo::{GrpoConfig, ToyGroundingEnv};
use kvg_core::kl_analysis::{SparseDist, TokenDistributionTrace, TracePosition};
use kvg_core::reward::RewardConfig;
use num_rational::Ratio;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn ratio((n, d): (i64, i64)) -> PyResult<Ratio<i64>> {
    if d == 0 {
        return Err(PyValueError::new_err("zero denominator"));
    }
    Ok(Ratio::new(n, d))
}

fn err(e: kvg_core::Error) -> PyErr {
    if e.is_invariant_violation() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Python object -> serde type, through the stdlib `json` module.
fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = PyModule::import_bound(py, "json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyModule::import_bound(py, "json")?.call_method1("loads", (text,))?.unbind())
}

/// Axis-aligned box on a pixel canvas, or on the normalized 0..=1000 grid
/// when no canvas size is given.
#[pyclass(frozen, name = "BBox")]
#[derive(Clone)]
struct PyBBox(kvg_core::BBox);

#[pymethods]
impl PyBBox {
    #[new]
    #[pyo3(signature = (coords, width=None, height=None))]
    fn new(coords: [i64; 4], width: Option<i64>, height: Option<i64>) -> PyResult<Self> {
        let space = match (width, height) {
            (Some(width), Some(height)) => CoordSpace::Pixel { width, height },
            (None, None) => CoordSpace::Normalized1000,
            _ => return Err(PyValueError::new_err("give both width and height, or neither")),
        };
        kvg_core::BBox::new(coords, space).map(PyBBox).map_err(err)
    }

    #[getter]
    fn coords(&self) -> [i64; 4] {
        self.0.coords()
    }

    #[getter]
    fn canvas(&self) -> Option<(i64, i64)> {
        match self.0.space() {
            CoordSpace::Pixel { width, height } => Some((width, height)),
            CoordSpace::Normalized1000 => None,
        }
    }

    fn area(&self) -> i64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBBox) -> PyResult<f64> {
        self.0.iou(&other.0).map_err(err)
    }

    /// Exact IoU as `(numerator, denominator)` in lowest terms.
    fn iou_exact(&self, other: &PyBBox) -> PyResult<(i64, i64)> {
        let r = self.0.iou_exact(&other.0).map_err(err)?;
        Ok((*r.numer(), *r.denom()))
    }

    fn to_normalized(&self) -> PyResult<PyBBox> {
        self.0.to_normalized_1000().map(PyBBox).map_err(err)
    }

    /// Normalized box mapped onto a `width` x `height` pixel canvas.
    fn to_pixel(&self, width: i64, height: i64) -> PyResult<PyBBox> {
        self.0.from_normalized_1000(width, height).map(PyBBox).map_err(err)
    }

    /// Maps the box through `c -> scale * c + offset`; scales are
    /// `(numerator, denominator)` pairs.
    #[pyo3(signature = (scale_x, scale_y, offset_x=0, offset_y=0))]
    fn transform(&self, scale_x: (i64, i64), scale_y: (i64, i64), offset_x: i64, offset_y: i64) -> PyResult<PyBBox> {
        let t = AffineTransform::new(ratio(scale_x)?, ratio(scale_y)?, offset_x, offset_y).map_err(err)?;
        self.0.apply_transform(&t).map(PyBBox).map_err(err)
    }

    fn __repr__(&self) -> String {
        match self.canvas() {
            Some((w, h)) => format!("BBox({}, width={w}, height={h})", self.0),
            None => format!("BBox({})", self.0),
        }
    }

    fn __eq__(&self, other: &PyBBox) -> bool {
        self.0 == other.0
    }
}

/// Parses a `<think>..</think><answer>[..]</answer>` response.
#[pyfunction]
fn parse_response(py: Python<'_>, text: &str) -> PyResult<PyObject> {
    let p = kvg_core::reward::parse_response(text);
    let mut out = serde_json::to_value(&p).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    out["failure"] = p.failure.map_or(serde_json::Value::Null, |f| f.to_string().into());
    to_py(py, &out)
}

/// `{"total", "iou_reward", "format_reward"}` for one response against a
/// normalized ground-truth box.
#[pyfunction]
#[pyo3(signature = (response, gt, tau=0.5, w_iou=1.0, w_format=1.0, gate_iou_on_format=false))]
fn total_reward(
    py: Python<'_>,
    response: &str,
    gt: [i64; 4],
    tau: f64,
    w_iou: f64,
    w_format: f64,
    gate_iou_on_format: bool,
) -> PyResult<PyObject> {
    let cfg = RewardConfig { tau, w_iou, w_format, gate_iou_on_format };
    cfg.validate().map_err(err)?;
    let gt = kvg_core::BBox::normalized(gt).map_err(err)?;
    let b = kvg_core::reward::total_reward(response, &gt, &cfg).map_err(err)?;
    to_py(py, &b)
}

#[pyfunction]
#[pyo3(signature = (rewards, epsilon_std=1e-8))]
fn compute_advantages(rewards: Vec<f64>, epsilon_std: f64) -> PyResult<Vec<f64>> {
    kvg_core::grpo::compute_advantages(&rewards, epsilon_std).map_err(err)
}

/// Per-sample KL estimate from the reference and current log-probabilities.
#[pyfunction]
fn kl_estimate(logp_ref: f64, logp_theta: f64) -> PyResult<f64> {
    kvg_core::grpo::kl_estimate(logp_ref, logp_theta).map_err(err)
}

/// `"kept"`, `"dropped_all_correct"` or `"dropped_all_incorrect"`.
#[pyfunction]
fn classify_case(flags: Vec<bool>) -> PyResult<&'static str> {
    Ok(match kvg_core::filtering::classify_case(&flags).map_err(err)? {
        Verdict::Kept => "kept",
        Verdict::DroppedAllCorrect => "dropped_all_correct",
        Verdict::DroppedAllIncorrect => "dropped_all_incorrect",
    })
}

#[pyfunction]
fn token_kl(p: BTreeMap<u32, f64>, q: BTreeMap<u32, f64>) -> PyResult<f64> {
    kvg_core::kl_analysis::token_kl(&p, &q).map_err(err)
}

/// Mean KL over the reasoning and answer segments of one trace.
/// `positions` is a list of `(p, q)` token distributions.
#[pyfunction]
#[pyo3(signature = (positions, split_index, truncated=false))]
fn segment_divergence(
    py: Python<'_>,
    positions: Vec<(SparseDist, SparseDist)>,
    split_index: usize,
    truncated: bool,
) -> PyResult<PyObject> {
    let positions = positions.into_iter().map(|(p, q)| TracePosition { p, q }).collect();
    let trace = TokenDistributionTrace::new(positions, split_index, truncated).map_err(err)?;
    to_py(py, &kvg_core::kl_analysis::segment_divergence(&trace))
}

/// Scores predictions and aggregates accuracy. Returns
/// `(scored_instances, report)`.
#[pyfunction]
#[pyo3(signature = (ground_truth, predictions, threshold=0.5, mode="tagged", tag_columns=Vec::new()))]
fn evaluate(
    py: Python<'_>,
    ground_truth: &Bound<'_, PyAny>,
    predictions: &Bound<'_, PyAny>,
    threshold: f64,
    mode: &str,
    tag_columns: Vec<String>,
) -> PyResult<(PyObject, PyObject)> {
    let gts: Vec<GroundTruth> = from_py(py, ground_truth)?;
    let preds: Vec<Prediction> = from_py(py, predictions)?;
    let mode = serde_json::from_value(mode.into()).map_err(|_| PyValueError::new_err(format!("unknown mode `{mode}`")))?;
    let cfg = EvalConfig { threshold, mode, tag_columns, ..EvalConfig::default() };
    cfg.validate().map_err(err)?;
    let (scored, report) = kvg_core::evaluation::evaluate(&gts, &preds, &cfg).map_err(err)?;
    Ok((to_py(py, &scored)?, to_py(py, &report)?))
}

/// Trains the toy grounding policy with GRPO. Returns the log rows and
/// the final logit table.
#[pyfunction]
#[pyo3(signature = (seed=0, scenes=16, candidates=4, iterations=200, beta=0.04, learning_rate=4.0))]
fn train_toy(
    py: Python<'_>,
    seed: u64,
    scenes: usize,
    candidates: usize,
    iterations: usize,
    beta: f64,
    learning_rate: f64,
) -> PyResult<(PyObject, Vec<f64>)> {
    let env = ToyGroundingEnv::generate(scenes, candidates, seed).map_err(err)?;
    let cfg = GrpoConfig { iterations, beta, learning_rate, ..GrpoConfig::default() };
    let log = py
        .allow_threads(|| kvg_core::grpo::train(&env, &cfg, &RewardConfig::default(), seed))
        .map_err(err)?;
    Ok((to_py(py, &log.rows)?, log.policy.logits))
}

#[pymodule]
fn kvg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(total_reward, m)?)?;
    m.add_function(wrap_pyfunction!(compute_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(kl_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(classify_case, m)?)?;
    m.add_function(wrap_pyfunction!(token_kl, m)?)?;
    m.add_function(wrap_pyfunction!(segment_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
