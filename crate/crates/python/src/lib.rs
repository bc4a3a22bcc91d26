use pyo3::prelude::*;

#[pymodule]
fn anticap(_m: &Bound<PyModule>) -> PyResult<()> { Ok(()) }
