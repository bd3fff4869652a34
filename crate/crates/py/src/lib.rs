//! Python bindings: run experiments from a config and read back results.
//!
//! ```text
//! import cace_lab
//! exp = cace_lab.Experiment("configs/smoke.toml", out="/tmp/smoke")
//! rows = exp.run()
//! ```

use std::path::PathBuf;

use cace_core::data::{generate_bars, BarsConfig, ConceptAxis};
use cace_core::estimators::{gt_cace, ConceptSpec};
use cace_core::harness::{Harness, HarnessError, RunOptions, TrainStage};
use cace_core::models::{ColorOnlyPredictor, OrientationPredictor, Predictor};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;

create_exception!(cace_lab, CaceError, PyRuntimeError);
create_exception!(cace_lab, ConfigError, CaceError);
create_exception!(cace_lab, MissingArtifactError, CaceError);

fn to_py(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Config(_) => ConfigError::new_err(e.to_string()),
        HarnessError::MissingArtifact(_) => MissingArtifactError::new_err(e.to_string()),
        other => CaceError::new_err(other.to_string()),
    }
}

/// Serialise through JSON so Python gets plain dicts and lists.
fn json_to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| CaceError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// One experiment config bound to an output directory.
#[pyclass(module = "cace_lab")]
struct Experiment {
    inner: Harness,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (config, out=None, seed=None, force=false))]
    fn new(config: PathBuf, out: Option<PathBuf>, seed: Option<u64>, force: bool) -> PyResult<Self> {
        let inner = Harness::from_path(&config, RunOptions { seed, out, force }).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.config.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    /// Sweep cell labels, in order.
    fn cells(&self) -> Vec<String> {
        self.inner.cells().into_iter().map(|c| c.label).collect()
    }

    /// Returns `(built, reused)` dataset keys.
    fn generate(&self, py: Python<'_>) -> PyResult<(Vec<String>, Vec<String>)> {
        let o = py.detach(|| self.inner.generate()).map_err(to_py)?;
        Ok((o.built, o.reused))
    }

    /// `stage` is `"classifier"`, `"vae"` or `"all"`.
    #[pyo3(signature = (stage="all"))]
    fn train(&self, py: Python<'_>, stage: &str) -> PyResult<(Vec<String>, Vec<String>)> {
        let stage = match stage {
            "classifier" => TrainStage::Classifier,
            "vae" => TrainStage::Vae,
            "all" => TrainStage::All,
            other => return Err(PyValueError::new_err(format!("unknown stage {other:?}"))),
        };
        let o = py.detach(|| self.inner.train(stage)).map_err(to_py)?;
        Ok((o.built, o.reused))
    }

    /// Result rows as dicts.
    fn estimate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let o = py.detach(|| self.inner.estimate()).map_err(to_py)?;
        json_to_py(py, &o.rows)
    }

    /// Diagnostic reports as dicts.
    fn diagnose(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let o = py.detach(|| self.inner.diagnose()).map_err(to_py)?;
        json_to_py(py, &o.reports)
    }

    /// Writes results.csv / results.jsonl / table.txt and returns the table.
    fn report(&self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| self.inner.report()).map_err(to_py)
    }

    /// Every stage; returns all result rows.
    fn run(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let rows = py
            .detach(|| {
                self.inner.run_all()?;
                self.inner.write_outputs()?;
                self.inner.collected_rows()
            })
            .map_err(to_py)?;
        json_to_py(py, &rows)
    }

    fn results_csv(&self) -> PathBuf {
        self.inner.results_csv()
    }

    fn __repr__(&self) -> String {
        format!(
            "Experiment({:?}, out={:?})",
            self.inner.config.name, self.inner.out_dir
        )
    }
}

/// Bars images as `(pixels, class_labels, concept_labels)`; `pixels` holds
/// one flat `(3, 16, 16)` list per image.
#[pyfunction]
#[pyo3(signature = (red_fraction_class0, red_fraction_class1, n, seed=0))]
fn bars<'py>(
    py: Python<'py>,
    red_fraction_class0: f64,
    red_fraction_class1: f64,
    n: usize,
    seed: u64,
) -> PyResult<(Bound<'py, PyList>, Vec<usize>, Vec<usize>)> {
    let mut cfg = BarsConfig::with_bias(red_fraction_class0, red_fraction_class1);
    cfg.n_train = n;
    cfg.n_test = 1;
    cfg.seed = seed;
    let d = generate_bars(&cfg)
        .map_err(|e| ConfigError::new_err(e.to_string()))?
        .train;
    let pixels = PyList::new(py, d.records.iter().map(|r| r.pixels.data().to_vec()))?;
    let classes = d.records.iter().map(|r| r.class_label).collect();
    let concepts = d.records.iter().map(|r| r.concept_label).collect();
    Ok((pixels, classes, concepts))
}

/// Exact colour effect of a reference stub on bars: `"color"` reacts only
/// to red pixels (effect 1), `"orientation"` only to the bar (effect 0).
#[pyfunction]
#[pyo3(signature = (stub, red_fraction_class0, red_fraction_class1, n=1000, seed=0))]
fn stub_gt_cace(
    stub: &str,
    red_fraction_class0: f64,
    red_fraction_class1: f64,
    n: usize,
    seed: u64,
) -> PyResult<f64> {
    let predictor: Box<dyn Predictor> = match stub {
        "color" => Box::new(ColorOnlyPredictor {
            height: 16,
            width: 16,
        }),
        "orientation" => Box::new(OrientationPredictor {
            height: 16,
            width: 16,
        }),
        other => return Err(PyValueError::new_err(format!("unknown stub {other:?}"))),
    };
    let mut cfg = BarsConfig::with_bias(red_fraction_class0, red_fraction_class1);
    cfg.n_train = n;
    cfg.n_test = 1;
    cfg.seed = seed;
    let d = generate_bars(&cfg)
        .map_err(|e| ConfigError::new_err(e.to_string()))?
        .train;
    let report = gt_cace(
        &d,
        predictor.as_ref(),
        &ConceptSpec::binary(ConceptAxis::Primary, 0),
    )
    .map_err(|e| CaceError::new_err(e.to_string()))?;
    Ok(report.summary)
}

#[pymodule]
pub fn cace_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(bars, m)?)?;
    m.add_function(wrap_pyfunction!(stub_gt_cace, m)?)?;
    m.add("CaceError", m.py().get_type::<CaceError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("MissingArtifactError", m.py().get_type::<MissingArtifactError>())?;
    Ok(())
}
