//! Python bindings: hierarchies, documents, training, prediction and
//! evaluation. Structured results (reports, histories, configs) cross the
//! boundary as JSON and come out as plain dicts.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lahcn::corpus::{self, Vocabulary};
use lahcn::hierarchy::LabelHierarchy;
use lahcn::metrics::{au_prc_of, ScoredSet};
use lahcn::synthetic::{generate, SyntheticSpec};
use lahcn::training::{self, ModelParams, TrainConfig, TrainError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::Io(m) => PyIOError::new_err(m),
        other => value_err(other),
    }
}

fn to_py_json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Hierarchy", module = "lahcn", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Hierarchy {
    inner: LabelHierarchy,
}

#[pymethods]
impl Hierarchy {
    /// Builds a tree from `(parent, child)` pairs; `"root"` is the virtual root.
    #[new]
    fn new(edges: Vec<(String, String)>) -> PyResult<Self> {
        Ok(Self { inner: LabelHierarchy::from_edges(&edges).map_err(value_err)? })
    }

    /// Parses the tab-separated `parent<TAB>child` format.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: LabelHierarchy::parse(text, "<string>").map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: LabelHierarchy::load(path).map_err(value_err)? })
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn level_sizes(&self) -> Vec<usize> {
        self.inner.level_sizes()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn labels_at_level(&self, level: usize) -> PyResult<Vec<String>> {
        let labels = self.inner.labels_at_level(level).map_err(value_err)?;
        Ok(labels.into_iter().map(String::from).collect())
    }

    fn level_of(&self, label: &str) -> Option<usize> {
        self.inner.level_of(label)
    }

    /// `None` for children of the virtual root.
    fn parent_of(&self, label: &str) -> Option<String> {
        self.inner.parent_of(label).map(String::from)
    }

    /// Sorted ancestor closure of `labels`.
    fn ancestor_closure(&self, labels: Vec<String>) -> PyResult<Vec<String>> {
        Ok(self.inner.ancestor_closure(&labels).map_err(value_err)?.into_iter().collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Hierarchy(labels={}, level_sizes={:?})", self.inner.len(), self.inner.level_sizes())
    }
}

#[pyclass(name = "Document", module = "lahcn", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Document {
    inner: corpus::Document,
}

#[pymethods]
impl Document {
    /// Labels are closed under their ancestors on construction.
    #[new]
    #[pyo3(signature = (id, tokens, labels, hierarchy))]
    fn new(id: String, tokens: Vec<String>, labels: Vec<String>, hierarchy: &Hierarchy) -> PyResult<Self> {
        let inner = corpus::Document::new(id, tokens, &labels, &hierarchy.inner).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.iter().cloned().collect()
    }

    fn __repr__(&self) -> String {
        format!("Document(id={:?}, tokens={}, labels={:?})", self.inner.id, self.inner.tokens.len(), self.inner.labels)
    }
}

fn unwrap_docs(docs: &[PyRef<'_, Document>]) -> Vec<corpus::Document> {
    docs.iter().map(|d| d.inner.clone()).collect()
}

#[pyclass(name = "Model", module = "lahcn", frozen)]
pub struct Model {
    params: ModelParams,
    hierarchy: LabelHierarchy,
}

#[pymethods]
impl Model {
    /// Loads a checkpoint; fails if it was built for another hierarchy.
    #[staticmethod]
    fn load(path: &str, hierarchy: &Hierarchy) -> PyResult<Self> {
        let params = training::load_checkpoint(path, &hierarchy.inner).map_err(train_err)?;
        Ok(Self { params, hierarchy: hierarchy.inner.clone() })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        training::save_checkpoint(&self.params, path).map_err(train_err)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.hierarchy.labels().to_vec()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_json(py, &self.params.config)
    }

    /// Scores in global label order. `alpha` defaults to the trained blend.
    #[pyo3(signature = (tokens, alpha=None))]
    fn predict<'py>(&self, py: Python<'py>, tokens: Vec<String>, alpha: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
        let alpha = alpha.unwrap_or(self.params.config.alpha);
        let (scores, _) = self.params.predict(&tokens, alpha).map_err(value_err)?;
        let out = PyDict::new(py);
        out.set_item("labels", self.labels())?;
        out.set_item("local", scores.local_concat().into_vec())?;
        out.set_item("global", scores.global.into_vec())?;
        out.set_item("blended", scores.blended.into_vec())?;
        Ok(out)
    }

    /// Label-by-token attention weights, one matrix per level.
    fn attention(&self, tokens: Vec<String>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let (_, traces) = self.params.predict(&tokens, self.params.config.alpha).map_err(value_err)?;
        Ok(traces.iter().map(|t| (0..t.a.rows()).map(|r| t.a.row(r).to_vec()).collect()).collect())
    }

    #[pyo3(signature = (documents, alpha=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        documents: Vec<PyRef<'py, Document>>,
        alpha: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let docs = unwrap_docs(&documents);
        let alpha = alpha.unwrap_or(self.params.config.alpha);
        let report = training::evaluate(&self.params, &docs, &self.hierarchy, alpha).map_err(train_err)?;
        to_py_json(py, &report)
    }

    fn __repr__(&self) -> String {
        format!("Model(variant={}, level_sizes={:?})", self.params.config.variant.as_str(), self.params.level_sizes)
    }
}

/// Trains a model. Keyword arguments are training settings (`seed`,
/// `max_epochs`, `dim`, ...). Returns `(model, history)`.
#[pyfunction]
#[pyo3(signature = (hierarchy, documents, valid=None, **settings))]
fn train<'py>(
    py: Python<'py>,
    hierarchy: &Hierarchy,
    documents: Vec<PyRef<'py, Document>>,
    valid: Option<Vec<PyRef<'py, Document>>>,
    settings: Option<&Bound<'py, PyDict>>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let cfg: TrainConfig = match settings {
        Some(s) => {
            let text: String = py.import("json")?.call_method1("dumps", (s,))?.extract()?;
            serde_json::from_str(&text).map_err(value_err)?
        }
        None => TrainConfig::default(),
    };
    let docs = unwrap_docs(&documents);
    let valid = valid.as_deref().map(unwrap_docs).unwrap_or_default();
    let hier = hierarchy.inner.clone();
    let (params, history) = py
        .detach(|| {
            let vocab = Vocabulary::build(&docs, cfg.min_count).map_err(|e| TrainError::Config(e.to_string()))?;
            training::train(&cfg, &docs, &valid, &hier, &vocab, None)
        })
        .map_err(train_err)?;
    let history = to_py_json(py, &history)?;
    Ok((Model { params, hierarchy: hier }, history))
}

#[pyfunction]
fn load_corpus(path: &str, hierarchy: &Hierarchy) -> PyResult<Vec<Document>> {
    let docs = corpus::load_corpus(path, &hierarchy.inner).map_err(value_err)?;
    Ok(docs.into_iter().map(|inner| Document { inner }).collect())
}

/// The seeded two-level corpus where each leaf owns a signature token.
#[pyfunction]
#[pyo3(signature = (documents=60, seed=7))]
fn synthetic_corpus(documents: usize, seed: u64) -> PyResult<(Hierarchy, Vec<Document>)> {
    let c = generate(&SyntheticSpec { documents, seed, ..SyntheticSpec::default() }).map_err(value_err)?;
    let docs = c.documents.into_iter().map(|inner| Document { inner }).collect();
    Ok((Hierarchy { inner: c.hierarchy }, docs))
}

/// Area under the precision-recall curve of pooled `(score, truth)` pairs.
#[pyfunction]
fn au_prc(scores: Vec<f64>, truths: Vec<bool>) -> PyResult<f64> {
    if scores.len() != truths.len() {
        return Err(PyValueError::new_err(format!("{} scores but {} truths", scores.len(), truths.len())));
    }
    au_prc_of(&ScoredSet::from_pairs(scores.into_iter().zip(truths))).map_err(value_err)
}

#[pymodule]
#[pyo3(name = "lahcn")]
fn lahcn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Hierarchy>()?;
    m.add_class::<Document>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(au_prc, m)?)?;
    Ok(())
}
