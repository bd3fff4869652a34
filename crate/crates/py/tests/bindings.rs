use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<R>(f: impl FnOnce(Python<'_>, &Bound<'_, PyModule>) -> PyResult<R>) -> R {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(cace_lab::cace_lab)(py);
        let m = m.bind(py).cast::<PyModule>().unwrap().clone();
        f(py, &m).unwrap()
    })
}

#[test]
fn stub_effects_through_python() {
    let (one, zero): (f64, f64) = with_module(|_, m| {
        let f = m.getattr("stub_gt_cace")?;
        Ok((
            f.call1(("color", 0.99, 0.01))?.extract()?,
            f.call1(("orientation", 0.6, 0.4))?.extract()?,
        ))
    });
    assert!((one - 1.0).abs() < 1e-9);
    assert_eq!(zero, 0.0);
}

#[test]
fn errors_map_to_module_exceptions() {
    with_module(|py, m| {
        let locals = PyDict::new(py);
        locals.set_item("m", m)?;
        let code = c"
try:
    m.Experiment('/nonexistent.toml')
    kind = None
except m.ConfigError:
    kind = 'config'
";
        py.run(code, None, Some(&locals))?;
        let kind: Option<String> = locals.get_item("kind")?.unwrap().extract()?;
        assert_eq!(kind.as_deref(), Some("config"));
        assert!(m.getattr("MissingArtifactError")?.is_truthy()?);
        Ok(())
    });
}
