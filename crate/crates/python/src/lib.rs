//! Python bindings: guides, bundles, runs, sweeps and lint.
//!
//! Structured results cross the boundary as plain dicts and lists.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use tsgflow_core::dag::{serialize_dag, validate_dag};
use tsgflow_core::engine::{RunConfig, Scenario};
use tsgflow_core::harness::{self, oracle_makespan, parse_executor_range};
use tsgflow_core::lint::{lint as lint_doc, lint_source};
use tsgflow_core::memory::MemoryValue;
use tsgflow_core::plugins::pearson_coefficient;
use tsgflow_core::qpp::{prepare_query as prepare, QppManifest, QueryTemplate};

create_exception!(tsgflow, TsgflowError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    TsgflowError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn bindings(params: Option<&Bound<'_, PyDict>>) -> PyResult<BTreeMap<String, MemoryValue>> {
    let mut out = BTreeMap::new();
    if let Some(d) = params {
        for (k, v) in d.iter() {
            let value = MemoryValue::from_literal(&from_py(&v)?).map_err(err)?;
            out.insert(k.extract::<String>()?, value);
        }
    }
    Ok(out)
}

fn prepare_from(templates: &[QueryTemplate], name: &str, params: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let t = templates
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| err(format!("unknown template `{name}`")))?;
    Ok(prepare(t, &bindings(params)?).map_err(err)?.text)
}

/// A parsed guide with its execution DAG and query templates.
#[pyclass(module = "tsgflow", frozen)]
struct Guide {
    inner: harness::Guide,
}

#[pymethods]
impl Guide {
    #[new]
    fn new(markdown: &str) -> PyResult<Self> {
        Ok(Guide {
            inner: harness::Guide::from_markdown(markdown).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Self::new(&std::fs::read_to_string(&path).map_err(|e| err(format!("{}: {e}", path.display())))?)
    }

    #[getter]
    fn tsg_id(&self) -> &str {
        &self.inner.doc.tsg_id
    }

    #[getter]
    fn title(&self) -> &str {
        &self.inner.doc.title
    }

    fn step_ids(&self) -> Vec<String> {
        self.inner.doc.steps.iter().map(|s| s.id.to_string()).collect()
    }

    fn dag<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.dag)
    }

    fn dag_json(&self) -> String {
        serialize_dag(&self.inner.dag)
    }

    /// Structural violations of the DAG; empty when valid.
    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &validate_dag(&self.inner.dag).violations)
    }

    fn templates<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.templates)
    }

    fn manifest_json(&self) -> String {
        QppManifest::new(&self.inner.doc.tsg_id, &self.inner.templates).to_json()
    }

    #[pyo3(signature = (template, params=None))]
    fn prepare(&self, template: &str, params: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
        prepare_from(&self.inner.templates, template, params)
    }

    fn lint<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &lint_doc(&self.inner.doc))
    }

    fn __repr__(&self) -> String {
        format!(
            "Guide(tsg_id={:?}, steps={}, edges={})",
            self.inner.doc.tsg_id,
            self.inner.doc.steps.len(),
            self.inner.dag.edges.len()
        )
    }
}

/// A bundle directory: guide, fixtures, scenarios and optional baseline.
#[pyclass(module = "tsgflow", frozen)]
struct Bundle {
    inner: harness::Bundle,
}

impl Bundle {
    fn scenario(&self, name: &str) -> PyResult<Scenario> {
        let path = std::path::Path::new(name);
        if path.exists() {
            Scenario::load(path).map_err(err)
        } else {
            self.inner.scenario(name).map_err(err)
        }
    }
}

#[pymethods]
impl Bundle {
    #[new]
    fn new(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Bundle {
            inner: harness::Bundle::load(path).map_err(err)?,
        })
    }

    #[getter]
    fn tsg_id(&self) -> &str {
        self.inner.tsg_id()
    }

    #[getter]
    fn guide(&self) -> Guide {
        Guide {
            inner: self.inner.guide.clone(),
        }
    }

    fn scenarios(&self) -> PyResult<Vec<String>> {
        Ok(self
            .inner
            .scenario_paths()
            .map_err(err)?
            .iter()
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
            .collect())
    }

    /// Runs in virtual time and returns the report, trace included.
    #[pyo3(signature = (scenario, executors=1, retry=2))]
    fn run<'py>(&self, py: Python<'py>, scenario: &str, executors: usize, retry: u32) -> PyResult<Bound<'py, PyAny>> {
        let s = self.scenario(scenario)?;
        let config = RunConfig {
            max_executors: executors,
            retry_limit: retry,
            run_id: s.id.clone(),
            ..RunConfig::default()
        };
        let report = py.detach(|| self.inner.run(&s, &config)).map_err(err)?;
        to_py(py, &report)
    }

    #[pyo3(signature = (scenario, executors=1, retry=2))]
    fn trace_jsonl(&self, py: Python<'_>, scenario: &str, executors: usize, retry: u32) -> PyResult<String> {
        let s = self.scenario(scenario)?;
        let config = RunConfig {
            max_executors: executors,
            retry_limit: retry,
            run_id: s.id.clone(),
            ..RunConfig::default()
        };
        Ok(py.detach(|| self.inner.run(&s, &config)).map_err(err)?.trace_jsonl())
    }

    /// `executors` is `"A..B"`, `"A,B,C"` or a list of counts.
    #[pyo3(signature = (scenario, executors=None, retry=2))]
    fn sweep<'py>(
        &self,
        py: Python<'py>,
        scenario: &str,
        executors: Option<&Bound<'py, PyAny>>,
        retry: u32,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ks: Vec<usize> = match executors {
            None => (1..=5).collect(),
            Some(obj) => match obj.extract::<String>() {
                Ok(text) => parse_executor_range(&text).ok_or_else(|| err(format!("invalid executor range `{text}`")))?,
                Err(_) => obj.extract()?,
            },
        };
        let s = self.scenario(scenario)?;
        let report = py.detach(|| harness::sweep(&self.inner, &s, &ks, retry)).map_err(err)?;
        to_py(py, &report)
    }

    #[pyo3(signature = (scenario, retry=2))]
    fn oracle<'py>(&self, py: Python<'py>, scenario: &str, retry: u32) -> PyResult<Bound<'py, PyAny>> {
        let s = self.scenario(scenario)?;
        to_py(py, &oracle_makespan(&self.inner.guide.dag, &s, retry).map_err(err)?)
    }

    fn __repr__(&self) -> String {
        format!("Bundle(tsg_id={:?}, dir={:?})", self.inner.tsg_id(), self.inner.dir.display().to_string())
    }
}

/// Lints guide source text.
#[pyfunction]
fn lint(py: Python<'_>, markdown: &str) -> PyResult<Py<PyAny>> {
    Ok(to_py(py, &lint_source(markdown))?.unbind())
}

/// Instantiates a template from a manifest JSON document.
#[pyfunction]
#[pyo3(signature = (manifest_json, template, params=None))]
fn prepare_query(manifest_json: &str, template: &str, params: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let manifest = QppManifest::from_json(manifest_json).map_err(err)?;
    prepare_from(&manifest.templates(), template, params)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    pearson_coefficient(&x, &y).map_err(err)
}

#[pymodule]
fn tsgflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Guide>()?;
    m.add_class::<Bundle>()?;
    m.add_function(wrap_pyfunction!(lint, m)?)?;
    m.add_function(wrap_pyfunction!(prepare_query, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add("TsgflowError", m.py().get_type::<TsgflowError>())?;
    Ok(())
}
