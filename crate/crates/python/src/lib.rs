//! Python bindings. Tensors cross the boundary as a flat row-major list plus
//! a shape; the `lambdakit` Python package wraps these in numpy arrays.
//! Structured reports come back as JSON text.

use lambdakit::complexity::{self, StageSpec, GIB};
use lambdakit::layer::{init_params, Implementation};
use lambdakit::relpos::parse_scope;
use lambdakit::suites::{run_suite, Suite, SuiteOptions};
use lambdakit::tensor::io::{self, AnyTensor};
use lambdakit::variants::{masked_lambda_forward, MaskSpec};
use lambdakit::{lambda_layer_forward, Boundary, Geometry, LambdaConfig, LambdaError, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn lambda_err(e: LambdaError) -> PyErr {
    match e {
        LambdaError::Io(_) => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn json(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(value_err)
}

/// Runs the lambda layer with self-context on `x [b, n, d_in]`, using
/// parameters initialized from `seed`. Returns `(data, shape)`.
#[pyfunction]
#[pyo3(signature = (x, shape, geometry, k, h, d_out, seed = 0, scope = None, boundary = "clamped", implementation = "einsum", causal = false))]
#[allow(clippy::too_many_arguments)]
fn forward(
    x: Vec<f64>,
    shape: Vec<usize>,
    geometry: &str,
    k: usize,
    h: usize,
    d_out: usize,
    seed: u64,
    scope: Option<&str>,
    boundary: &str,
    implementation: &str,
    causal: bool,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    if shape.len() != 3 {
        return Err(value_err(format!("x must be [b, n, d_in], got shape {shape:?}")));
    }
    let geometry: Geometry = geometry.parse().map_err(value_err)?;
    let mut config = LambdaConfig::new(shape[2], d_out, k, h, geometry.clone());
    config.boundary = boundary.parse::<Boundary>().map_err(value_err)?;
    config.implementation = implementation.parse::<Implementation>().map_err(value_err)?;
    config.scope = scope.map(|s| parse_scope(s, &geometry)).transpose().map_err(value_err)?;
    let x = Tensor::new(shape, x).map_err(lambda_err)?;
    let params = init_params(&config, seed).map_err(lambda_err)?;
    let y = if causal {
        let mask = MaskSpec::causal(config.n()).map_err(lambda_err)?;
        masked_lambda_forward(&x, &x, &params, &config, &mask)
    } else {
        lambda_layer_forward(&x, &x, &params, &config)
    }
    .map_err(lambda_err)?;
    let shape = y.shape().to_vec();
    Ok((y.into_data(), shape))
}

/// Runs one verification suite and returns its report as JSON.
#[pyfunction]
#[pyo3(signature = (suite, seed = None, cases = 120))]
fn verify(suite: &str, seed: Option<u64>, cases: usize) -> PyResult<String> {
    let suite: Suite = suite.parse().map_err(value_err)?;
    let mut opts = SuiteOptions { cases, ..Default::default() };
    if let Some(s) = seed {
        opts.seed = s;
    }
    json(&run_suite(suite, &opts).map_err(lambda_err)?)
}

/// Activation-memory model for the default rows, as JSON.
#[pyfunction]
#[pyo3(signature = (b = 128, k = 16, h = 8, bytes = 4))]
fn memmodel(b: usize, k: usize, h: usize, bytes: usize) -> PyResult<String> {
    let report = complexity::memory_report(&StageSpec::resnet50(), b, h, bytes, &complexity::default_memory_rows(k))
        .map_err(lambda_err)?;
    json(&report)
}

/// Bytes as GiB, matching the memory model's convention.
#[pyfunction]
fn gib(bytes: u64) -> f64 {
    bytes as f64 / GIB
}

/// Writes an f64 (or, with `f32=True`, f32) tensor in LTNS format.
#[pyfunction]
#[pyo3(signature = (path, data, shape, f32 = false))]
fn save_tensor(path: &str, data: Vec<f64>, shape: Vec<usize>, f32: bool) -> PyResult<()> {
    let t = Tensor::new(shape, data).map_err(lambda_err)?;
    if f32 {
        io::save(path, &t.cast::<f32>())
    } else {
        io::save(path, &t)
    }
    .map_err(lambda_err)
}

/// Reads an LTNS file: `(data, shape, dtype)` with data widened to f64.
#[pyfunction]
fn load_tensor(path: &str) -> PyResult<(Vec<f64>, Vec<usize>, String)> {
    let any = io::load(path).map_err(lambda_err)?;
    let dtype = match any {
        AnyTensor::F64(_) => "f64",
        AnyTensor::F32(_) => "f32",
    };
    let t = any.to_f64();
    let shape = t.shape().to_vec();
    Ok((t.into_data(), shape, dtype.to_string()))
}

#[pymodule]
fn _lambdakit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(memmodel, m)?)?;
    m.add_function(wrap_pyfunction!(gib, m)?)?;
    m.add_function(wrap_pyfunction!(save_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(load_tensor, m)?)?;
    Ok(())
}
