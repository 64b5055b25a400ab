//! Python bindings: corpora and scores cross the boundary as plain dicts in
//! the JSONL sentence format.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use ::hiore::check::{gradcheck_all, PipelineCheck};
use ::hiore::cli::{cmd_train, Loaded};
use ::hiore::corpus::synthetic::{gen_synthetic as generate, SyntheticConfig};
use ::hiore::corpus::{BinaryTable, LabelSpace, Sentence};
use ::hiore::decode::{decode as decode_table, DEFAULT_THRESHOLD};
use ::hiore::eval::evaluate as score;
use ::hiore::graph::{dynamic_graph, static_graph, CellGraph};
use ::hiore::heads::ProbTable;

fn runtime(e: impl Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn invalid(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(invalid)
}

fn sentences(obj: &Bound<'_, PyAny>) -> PyResult<Vec<Sentence>> {
    let out: Vec<Sentence> = from_py(obj)?;
    for s in &out {
        s.validate().map_err(invalid)?;
    }
    Ok(out)
}

type CellEdge = ((usize, usize), (usize, usize));

fn edge_list(g: &CellGraph) -> Vec<CellEdge> {
    g.edges().iter().map(|&(a, b)| (g.cell(a), g.cell(b))).collect()
}

/// Unified label space: index 0 is the null label, then entity types, then
/// relation types.
#[pyclass(name = "LabelSpace", module = "hiore", frozen)]
struct PyLabelSpace {
    inner: LabelSpace,
}

#[pymethods]
impl PyLabelSpace {
    #[new]
    #[pyo3(signature = (entity_types, relation_types, symmetric = Vec::new()))]
    fn new(entity_types: Vec<String>, relation_types: Vec<String>, symmetric: Vec<String>) -> Self {
        Self {
            inner: LabelSpace::new(entity_types, relation_types).with_symmetric(symmetric),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn names(&self) -> Vec<String> {
        (0..self.inner.len()).map(|i| self.inner.name(i).to_string()).collect()
    }

    fn __repr__(&self) -> String {
        format!("LabelSpace({:?})", self.names())
    }
}

/// A trained or initialised model loaded from a checkpoint directory.
#[pyclass(name = "Checkpoint", module = "hiore", frozen)]
struct PyCheckpoint {
    inner: Loaded,
}

impl PyCheckpoint {
    fn probs_for(&self, py: Python<'_>, tokens: Vec<String>) -> PyResult<ProbTable> {
        if tokens.is_empty() {
            return Err(invalid("empty sentence"));
        }
        let s = Sentence {
            id: "input".into(),
            tokens,
            entities: vec![],
            relations: vec![],
        };
        let mut out = py.detach(|| self.inner.probs(std::slice::from_ref(&s), None)).map_err(runtime)?;
        Ok(out.remove(0))
    }
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let inner = py.detach(|| Loaded::open(&path)).map_err(runtime)?;
        Ok(Self { inner })
    }

    #[getter]
    fn labels(&self) -> PyLabelSpace {
        PyLabelSpace {
            inner: self.inner.model().labels.clone(),
        }
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold()
    }

    /// Row-major `n x n x |Y|` label probabilities, flattened.
    fn probs(&self, py: Python<'_>, tokens: Vec<String>) -> PyResult<Vec<f64>> {
        Ok(self.probs_for(py, tokens)?.probs)
    }

    /// Decoded entities and relations with mention scores.
    #[pyo3(signature = (tokens, threshold = None))]
    fn predict<'py>(&self, py: Python<'py>, tokens: Vec<String>, threshold: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
        let probs = self.probs_for(py, tokens)?;
        let out = decode_table(&probs, threshold.unwrap_or(self.inner.threshold()), &self.inner.model().labels);
        to_py(py, &out)
    }
}

/// Seeded synthetic corpus with the default generator settings.
#[pyfunction]
fn gen_synthetic<'py>(py: Python<'py>, seed: u64, count: usize) -> PyResult<Bound<'py, PyAny>> {
    let corpus = generate(seed, count, &SyntheticConfig::default()).map_err(invalid)?;
    to_py(py, &corpus)
}

#[pyfunction]
fn static_graph_edges(n: usize) -> Vec<CellEdge> {
    edge_list(&static_graph(n))
}

/// Edges licensed by a square 0/1 table of predicted non-null cells.
#[pyfunction]
fn dynamic_graph_edges(bits: Vec<Vec<u8>>) -> PyResult<Vec<CellEdge>> {
    let n = bits.len();
    if bits.iter().any(|r| r.len() != n) || bits.iter().flatten().any(|&b| b > 1) {
        return Err(invalid("bits must be a square table of 0 and 1"));
    }
    let table = BinaryTable {
        n,
        bits: bits.into_iter().flatten().collect(),
    };
    Ok(edge_list(&dynamic_graph(&table)))
}

/// Decodes flattened `n x n x |Y|` probabilities.
#[pyfunction]
#[pyo3(signature = (probs, n, labels, threshold = DEFAULT_THRESHOLD))]
fn decode<'py>(
    py: Python<'py>,
    probs: Vec<f64>,
    n: usize,
    labels: &PyLabelSpace,
    threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let k = labels.inner.len();
    if probs.len() != n * n * k {
        return Err(invalid(format!("{} probabilities for n = {n}, |Y| = {k}", probs.len())));
    }
    let logits = probs.iter().map(|p| p.ln()).collect();
    let table = ProbTable::from_logits(n, k, logits).map_err(invalid)?;
    to_py(py, &decode_table(&table, threshold, &labels.inner))
}

/// Strict micro scores of predicted against gold sentences, matched by id.
#[pyfunction]
#[pyo3(signature = (pred, gold, symmetric = Vec::new(), strata = false))]
fn evaluate<'py>(
    pred: &Bound<'py, PyAny>,
    gold: &Bound<'py, PyAny>,
    symmetric: Vec<String>,
    strata: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let (p, g) = (sentences(pred)?, sentences(gold)?);
    let sym: BTreeSet<String> = symmetric.into_iter().collect();
    let report = score(&p, &g, &sym, strata).map_err(invalid)?;
    to_py(pred.py(), &report)
}

/// Worst relative error per ablation variant of the 64-bit pipeline check.
#[pyfunction]
#[pyo3(signature = (size = 6, eps = 1e-2, seed = 1))]
fn gradcheck(py: Python<'_>, size: usize, eps: f64, seed: u64) -> PyResult<Vec<(String, f64)>> {
    let check = PipelineCheck {
        n: size,
        eps,
        seed,
        ..PipelineCheck::default()
    };
    let reports = py.detach(|| gradcheck_all(&check)).map_err(runtime)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.variant.name, r.report.max_rel_error()))
        .collect())
}

/// Trains from a TOML config and returns the epoch count and dev scores.
#[pyfunction]
#[pyo3(signature = (config, out_dir, deterministic = false))]
fn train<'py>(py: Python<'py>, config: PathBuf, out_dir: PathBuf, deterministic: bool) -> PyResult<Bound<'py, PyAny>> {
    let s = py.detach(|| cmd_train(&config, &out_dir, deterministic)).map_err(runtime)?;
    let summary = serde_json::json!({
        "epochs": s.epochs,
        "best_epoch": s.best_epoch,
        "best_average_f1": s.best_average_f1,
        "dev": s.dev,
        "test": s.test,
    });
    to_py(py, &summary)
}

#[pymodule]
#[pyo3(name = "hiore")]
fn hiore_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLabelSpace>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(static_graph_edges, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_graph_edges, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
