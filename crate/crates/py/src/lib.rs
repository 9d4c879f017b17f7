//! Python bindings for the model registry.
//!
//! `Service` talks to a registry either in-process (a data directory) or
//! over HTTP (an endpoint). The free functions expose the numeric core
//! without a registry.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use mmgr_core::api::{find_op, Caller, Client, HttpCaller, Service, JSON, NDJSON, OCTETS, OPS};
use mmgr_core::clock::SystemClock;
use mmgr_core::config::{Config, JobMode};
use mmgr_core::drift::{DriftParams, PageHinkley};
use mmgr_core::lineage::{EdgeKind, LineageGraph};
use mmgr_core::registry::Registry;
use mmgr_core::runtime::{self, FitParams, LinearModel};
use mmgr_core::table::{Column, Table};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyString};

create_exception!(mmgr, MmgrError, PyException, "An error reported by the registry; `code` holds its error code.");

fn to_py_err(e: mmgr_core::Error) -> PyErr {
    let code = e.code().as_str();
    let err = MmgrError::new_err(e.to_string());
    Python::attach(|py| {
        let _ = err.value(py).setattr("code", code);
    });
    err
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn model_dict<'py>(py: Python<'py>, m: &LinearModel) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("target", &m.target)?;
    d.set_item("features", &m.features)?;
    d.set_item("coefficients", &m.coefficients)?;
    d.set_item("intercept", m.intercept)?;
    d.set_item("train_residual_std", m.train_residual_std)?;
    Ok(d)
}

/// A registry connection.
#[pyclass(name = "Service", frozen)]
struct PyService {
    client: Client<Box<dyn Caller>>,
}

#[pymethods]
impl PyService {
    /// Opens `data_dir` in-process, or connects to `endpoint` over HTTP.
    #[new]
    #[pyo3(signature = (data_dir = None, endpoint = None, config = None))]
    fn new(data_dir: Option<PathBuf>, endpoint: Option<String>, config: Option<PathBuf>) -> PyResult<Self> {
        let caller: Box<dyn Caller> = match (data_dir, endpoint) {
            (None, Some(endpoint)) => Box::new(HttpCaller::new(&endpoint)),
            (dir, None) => {
                let mut cfg = Config::load(config.as_deref()).map_err(to_py_err)?;
                if let Some(dir) = dir {
                    cfg.data_dir = dir;
                }
                let dir = cfg.data_dir.clone();
                let registry = Registry::open(dir, cfg, Arc::new(SystemClock)).map_err(to_py_err)?;
                Box::new(Service::new(Arc::new(registry), JobMode::Inline, 1))
            }
            (Some(_), Some(_)) => {
                return Err(MmgrError::new_err("give either data_dir or endpoint, not both"));
            }
        };
        Ok(Self {
            client: Client::new(caller),
        })
    }

    /// Invokes operation `op` (for example `"model.show"`).
    ///
    /// `params` fills path placeholders and query parameters. `body` may be
    /// bytes, a string, or any JSON-serialisable object. JSON replies are
    /// decoded; NDJSON replies become a list; CSV becomes a string and
    /// binary replies stay bytes.
    #[pyo3(signature = (op, params = None, body = None))]
    fn call<'py>(
        &self,
        py: Python<'py>,
        op: &str,
        params: Option<BTreeMap<String, String>>,
        body: Option<Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let spec = find_op(op).ok_or_else(|| MmgrError::new_err(format!("unknown operation {op}")))?;
        let params = params.unwrap_or_default();
        let borrowed: BTreeMap<&str, String> = params.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        let mut req = self.client.request(op, &borrowed).map_err(to_py_err)?;
        for q in spec.query {
            if let Some(v) = params.get(*q) {
                req = req.query(q, v);
            }
        }
        if let Some(body) = body {
            let bytes: Vec<u8> = if let Ok(b) = body.cast::<PyBytes>() {
                b.as_bytes().to_vec()
            } else if let Ok(s) = body.cast::<PyString>() {
                s.to_str()?.as_bytes().to_vec()
            } else {
                let text: String = py.import("json")?.call_method1("dumps", (body,))?.extract()?;
                text.into_bytes()
            };
            req = req.body(bytes);
        }
        let resp = py.detach(|| self.client.send(&req)).map_err(to_py_err)?;
        match resp.content_type {
            JSON => json_loads(py, &String::from_utf8_lossy(&resp.body)),
            NDJSON => {
                let text = String::from_utf8_lossy(&resp.body);
                let items = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| json_loads(py, l))
                    .collect::<PyResult<Vec<_>>>()?;
                Ok(items.into_pyobject(py)?.into_any())
            }
            OCTETS => Ok(PyBytes::new(py, &resp.body).into_any()),
            _ => Ok(PyString::new(py, &String::from_utf8_lossy(&resp.body)).into_any()),
        }
    }
}

/// Fits a linear model to named float columns.
#[pyfunction]
#[pyo3(signature = (columns, features, target, ridge = 0.0, seed = 0, train_fraction = 1.0))]
fn fit<'py>(
    py: Python<'py>,
    columns: BTreeMap<String, Vec<f64>>,
    features: Vec<String>,
    target: &str,
    ridge: f64,
    seed: u64,
    train_fraction: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let table = Table::new(columns.into_iter().map(|(n, v)| Column::float(n, v)).collect()).map_err(to_py_err)?;
    let params = FitParams {
        ridge,
        seed,
        train_fraction,
    };
    let model = runtime::fit(&table, &features, target, &params).map_err(to_py_err)?;
    model_dict(py, &model)
}

/// Runs a Page-Hinkley detector over absolute errors and returns the
/// 1-based index of the first alarm, or `None`.
#[pyfunction]
#[pyo3(name = "page_hinkley")]
fn page_hinkley_alarm(errors: Vec<f64>, delta: f64, threshold: f64) -> PyResult<Option<u64>> {
    let mut ph = PageHinkley::new(DriftParams { delta, lambda: threshold });
    for (i, e) in errors.into_iter().enumerate() {
        if ph.observe(e).map_err(to_py_err)? {
            return Ok(Some(i as u64 + 1));
        }
    }
    Ok(None)
}

/// Snapshots whose results count when a model trained on `start` is evaluated.
#[pyfunction]
fn evaluation_scope(edges: Vec<(String, String, String)>, start: &str) -> PyResult<Vec<String>> {
    let mut g = LineageGraph::new();
    g.add_node(start);
    for (from, kind, to) in edges {
        let kind: EdgeKind = kind.parse().map_err(to_py_err)?;
        g.add_node(from.as_str());
        g.add_node(to.as_str());
        g.add_link(&from, &to, kind).map_err(to_py_err)?;
    }
    Ok(g.evaluation_scope(start).map_err(to_py_err)?.into_iter().collect())
}

/// Verifies a deployment bundle and returns its manifest.
#[pyfunction]
fn verify_bundle<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyAny>> {
    let manifest = mmgr_core::bundle::verify_bundle(data).map_err(to_py_err)?;
    let text = serde_json::to_string(&manifest).map_err(|e| MmgrError::new_err(e.to_string()))?;
    json_loads(py, &text)
}

/// Names of all service operations with their method, path and command.
#[pyfunction]
fn operations(py: Python<'_>) -> PyResult<Vec<Bound<'_, PyDict>>> {
    OPS.iter()
        .map(|op| {
            let d = PyDict::new(py);
            d.set_item("name", op.name)?;
            d.set_item("method", op.method.as_str())?;
            d.set_item("path", op.path)?;
            d.set_item("cli", format!("mmgr {}", op.cli))?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn mmgr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MmgrError", m.py().get_type::<MmgrError>())?;
    m.add_class::<PyService>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(page_hinkley_alarm, m)?)?;
    m.add_function(wrap_pyfunction!(evaluation_scope, m)?)?;
    m.add_function(wrap_pyfunction!(verify_bundle, m)?)?;
    m.add_function(wrap_pyfunction!(operations, m)?)?;
    Ok(())
}
