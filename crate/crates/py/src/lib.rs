//! Python bindings: `import kdem`.

use std::path::Path;

use kdem_core::design::assemble;
use kdem_core::exposure::{self, apply_corrections, panel_doses, risk_indices, scenario_label, DoseSeries};
use kdem_core::ingest::{load_panel, write_panel_dir, IngestConfig};
use kdem_core::mixed::{self, fit_reml, predict_individual, FitResult};
use kdem_core::model::{Contaminant, Member, ModelSpec, Sex};
use kdem_core::synth::{self, TruthConfig};
use kdem_core::KdemError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: KdemError) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn contaminant(half_life: f64, ptwi: f64) -> PyResult<Contaminant> {
    Contaminant::new("methylmercury", half_life, ptwi).map_err(py_err)
}

/// Reference burden of a constant PTWI dose, at `week` or in steady state.
#[pyfunction]
#[pyo3(signature = (half_life = 6.0, ptwi = 1.6, week = None))]
fn reference_exposure(half_life: f64, ptwi: f64, week: Option<usize>) -> PyResult<f64> {
    Ok(exposure::reference_exposure(&contaminant(half_life, ptwi)?, week))
}

/// Burden series of one weekly dose sequence: `(s0, burden, at_risk)`.
#[pyfunction]
#[pyo3(signature = (dose, half_life = 6.0, ptwi = 1.6, burn_in = None))]
fn burden(dose: Vec<f64>, half_life: f64, ptwi: f64, burn_in: Option<usize>) -> PyResult<(f64, Vec<f64>, bool)> {
    let c = contaminant(half_life, ptwi)?;
    let d = DoseSeries {
        member: Member {
            member_id: "py".into(),
            household_id: "py".into(),
            sex: Sex::F,
            birth_week: -1560,
        },
        socio: Vec::new(),
        active: vec![true; dose.len()],
        dose,
    };
    let e = exposure::kdem_series(&d, &c, burn_in.unwrap_or_else(|| c.default_burn_in()));
    Ok((e.s0, e.s, e.at_risk))
}

/// `(sigma2, rho)` from group residual variances and household sizes.
#[pyfunction]
fn decompose_variance(sigma_n2: Vec<f64>, sizes: Vec<f64>) -> PyResult<(f64, f64)> {
    let counts = vec![1; sigma_n2.len()];
    let d = mixed::decompose_variance(&sigma_n2, &sizes, &counts, None).map_err(py_err)?;
    Ok((d.sigma_eps2, d.rho))
}

/// Write a synthetic input directory; `config` is a JSON truth configuration.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None))]
fn simulate(out_dir: &str, config: Option<&str>) -> PyResult<()> {
    let cfg: TruthConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => TruthConfig::default(),
    };
    let sp = synth::generate(&cfg).map_err(py_err)?;
    write_panel_dir(Path::new(out_dir), &sp.panel, &synth::purchases(&sp.panel)).map_err(py_err)
}

/// REML fit of an input directory, returned as JSON.
#[pyfunction]
#[pyo3(signature = (data_dir, max_knots = 35))]
fn fit(data_dir: &str, max_knots: usize) -> PyResult<String> {
    let panel = load_panel(Path::new(data_dir), &IngestConfig::default()).map_err(py_err)?;
    let spec = ModelSpec {
        max_knots,
        ..ModelSpec::default()
    };
    let design = assemble(&panel, &spec).map_err(py_err)?;
    let f = fit_reml(&design).map_err(py_err)?;
    serde_json::to_string(&f).map_err(json_err)
}

/// Risk summary (JSON) of a fit from [`fit`] applied to `data_dir`.
#[pyfunction]
#[pyo3(signature = (fit_json, data_dir, half_life = 6.0, ptwi = 1.6, outside = None, edible = None, burn_in = None))]
fn expose(
    fit_json: &str,
    data_dir: &str,
    half_life: f64,
    ptwi: f64,
    outside: Option<f64>,
    edible: Option<f64>,
    burn_in: Option<usize>,
) -> PyResult<String> {
    let f: FitResult = serde_json::from_str(fit_json).map_err(json_err)?;
    let panel = load_panel(Path::new(data_dir), &IngestConfig::default()).map_err(py_err)?;
    let c = contaminant(half_life, ptwi)?;
    let intakes = predict_individual(&f, &panel).map_err(py_err)?;
    let intakes = apply_corrections(&intakes, outside, edible).map_err(py_err)?;
    let doses = panel_doses(&intakes, &panel).map_err(py_err)?;
    let burn_in = burn_in.unwrap_or_else(|| c.default_burn_in());
    let (_, summary) = risk_indices(&doses, &c, burn_in, &scenario_label(outside, edible), &panel.socio_vars);
    serde_json::to_string(&summary).map_err(json_err)
}

#[pymodule]
fn kdem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(reference_exposure, m)?)?;
    m.add_function(wrap_pyfunction!(burden, m)?)?;
    m.add_function(wrap_pyfunction!(decompose_variance, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(expose, m)?)?;
    Ok(())
}
