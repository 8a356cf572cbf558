use pyo3::prelude::*;

#[pymodule]
fn flowsr_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
