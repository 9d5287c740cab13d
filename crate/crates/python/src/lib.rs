//! Python bindings. Structured results cross the boundary as JSON strings.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use engine::channel::{self, ChannelParams};
use engine::experiment::{self, RunConfig};
use engine::keyrate::RateMode;
use engine::montecarlo;
use engine::optimize::evaluate;
use engine::protocol::ProtocolParams;
use engine::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::SolverFailure { .. } | Error::NonPositiveDenominator(_) | Error::Domain(_) | Error::UndefinedBound(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn mode(s: &str) -> PyResult<RateMode> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown mode `{s}`")))
}

/// Rate at the default source and detector settings for the given fiber lengths and fluctuation bound.
#[pyfunction]
#[pyo3(signature = (l_ac, l_bc, delta = 0.0, mode = "aopp"))]
fn key_rate(l_ac: f64, l_bc: f64, delta: f64, mode: &str) -> PyResult<f64> {
    let m = self::mode(mode)?;
    let ch = ChannelParams {
        l_ac,
        l_bc,
        ..ChannelParams::default()
    };
    let mut p = ProtocolParams::default();
    p.set_delta(delta);
    p.validate().map_err(to_py)?;
    ch.validate().map_err(to_py)?;
    let report = evaluate(&p, &ch, m, &Default::default()).map_err(to_py)?;
    Ok(report.rate(m))
}

#[pyfunction]
fn plob(eta: f64) -> PyResult<f64> {
    channel::plob_bound(eta).map_err(to_py)
}

/// Runs a TOML configuration as a single point and returns the report as JSON.
#[pyfunction]
fn run_point(config: &str) -> PyResult<String> {
    let cfg = RunConfig::from_toml(config).map_err(to_py)?;
    json(&experiment::run_point(&cfg).map_err(to_py)?)
}

#[pyfunction]
fn run_sweep(config: &str) -> PyResult<String> {
    let cfg = RunConfig::from_toml(config).map_err(to_py)?;
    json(&experiment::run_sweep(&cfg).map_err(to_py)?)
}

/// Soundness trials at the default source and detector settings on a symmetric channel.
#[pyfunction]
#[pyo3(signature = (total_km, delta, runs = 20, windows = 100_000_000, seed = 0))]
fn soundness(total_km: f64, delta: f64, runs: usize, windows: u64, seed: u64) -> PyResult<String> {
    let mut p = ProtocolParams::default();
    p.set_delta(delta);
    let s = montecarlo::soundness_suite(&p, &ChannelParams::symmetric(total_km), windows, runs, seed).map_err(to_py)?;
    json(&s)
}

#[pymodule]
fn sns_keyrate(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(key_rate, m)?)?;
    m.add_function(wrap_pyfunction!(plob, m)?)?;
    m.add_function(wrap_pyfunction!(run_point, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(soundness, m)?)?;
    Ok(())
}
