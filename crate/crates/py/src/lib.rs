//! Python module `fdp_transfer`.

use std::collections::BTreeSet;

use fdp_transfer::detection::{detect_informative, DetectionInput};
use fdp_transfer::experiment::{
    fit_rate_slopes as fit_slopes, read_rows, run_sweep, simulate, Axis, ErrorColumn, ExperimentConfig,
};
use fdp_transfer::federation::{audit_ledger, Transcript};
use fdp_transfer::highdim::{default_s_prime, dp_sparse_single as sparse_single, SparseRegConfig};
use fdp_transfer::lowdim::{dp_linreg_single as linreg_single, RegressionConfig};
use fdp_transfer::mean::kv_private_mean as kv_mean;
use fdp_transfer::mechanisms::{self, NoiseMode};
use fdp_transfer::rates;
use fdp_transfer::seed::SeedTree;
use fdp_transfer::Error;
use ndarray::{Array1, Array2};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(fdp_transfer, FdpError, PyException);

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter(_) | Error::Config(_) | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        other => FdpError::new_err(other.to_string()),
    }
}

fn mode(noise: bool) -> NoiseMode {
    if noise {
        NoiseMode::Calibrated
    } else {
        NoiseMode::Off
    }
}

fn design(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<(Array2<f64>, Array1<f64>)> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows of x must have equal length"));
    }
    if y.len() != n {
        return Err(PyValueError::new_err(format!("x has {n} rows but y has {} entries", y.len())));
    }
    let x = Array2::from_shape_vec((n, d), x.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((x, Array1::from(y)))
}

/// An (ε, δ) budget.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PrivacyBudget {
    inner: mechanisms::PrivacyBudget,
}

#[pymethods]
impl PrivacyBudget {
    #[new]
    fn new(epsilon: f64, delta: f64) -> PyResult<Self> {
        Ok(PrivacyBudget {
            inner: mechanisms::PrivacyBudget::new(epsilon, delta).map_err(err)?,
        })
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }

    fn halve(&self) -> Self {
        PrivacyBudget {
            inner: self.inner.halve(),
        }
    }

    fn __repr__(&self) -> String {
        format!("PrivacyBudget(epsilon={}, delta={})", self.inner.epsilon, self.inner.delta)
    }
}

#[pyfunction]
fn gaussian_noise_std(sensitivity: f64, epsilon: f64, delta: f64) -> PyResult<f64> {
    let budget = mechanisms::PrivacyBudget::new(epsilon, delta).map_err(err)?;
    mechanisms::gaussian_noise_std(sensitivity, budget).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (samples, epsilon, delta, seed=0))]
fn private_variance(samples: Vec<f64>, epsilon: f64, delta: f64, seed: u64) -> PyResult<f64> {
    let budget = mechanisms::PrivacyBudget::new(epsilon, delta).map_err(err)?;
    let mut rng = SeedTree::new(seed).rng();
    mechanisms::private_variance(&samples, budget, NoiseMode::Calibrated, &mut rng).map_err(err)
}

#[pyfunction]
fn hard_threshold(v: Vec<f64>, s: usize) -> Vec<f64> {
    mechanisms::hard_threshold(Array1::from(v).view(), s).to_vec()
}

#[pyfunction]
#[pyo3(signature = (v, s, epsilon, delta, lam, seed=0))]
fn peeling(v: Vec<f64>, s: usize, epsilon: f64, delta: f64, lam: f64, seed: u64) -> PyResult<Vec<f64>> {
    let budget = mechanisms::PrivacyBudget::new(epsilon, delta).map_err(err)?;
    let mut rng = SeedTree::new(seed).rng();
    mechanisms::peeling(Array1::from(v).view(), s, budget, lam, NoiseMode::Calibrated, &mut rng)
        .map(|a| a.to_vec())
        .map_err(err)
}

#[pyfunction]
fn rate_mean(n: usize, eta: f64, epsilon: f64) -> PyResult<f64> {
    rates::rate_mean(n, eta, epsilon).map_err(err)
}

#[pyfunction]
fn rate_lowdim(n: usize, d: usize, epsilon: f64, delta: f64, eta: f64) -> PyResult<f64> {
    rates::rate_lowdim(n, d, epsilon, delta, eta).map_err(err)
}

#[pyfunction]
fn rate_highdim(n: usize, s: usize, d: usize, epsilon: f64, delta: f64, eta: f64) -> PyResult<f64> {
    rates::rate_highdim(n, s, d, epsilon, delta, eta).map_err(err)
}

/// Sources are `(site_id, estimate)` pairs; returns the selected site ids.
#[pyfunction]
fn detect(
    target: Vec<f64>,
    sources: Vec<(u32, Vec<f64>)>,
    radius: f64,
    tilde_c: f64,
) -> PyResult<BTreeSet<u32>> {
    detect_informative(&DetectionInput {
        target_estimate: target,
        source_estimates: sources,
        threshold_radius: radius,
        tilde_c,
    })
    .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (data, epsilon, delta, eta=0.05, seed=0, noise=true))]
fn kv_private_mean<'py>(
    py: Python<'py>,
    data: Vec<f64>,
    epsilon: f64,
    delta: f64,
    eta: f64,
    seed: u64,
    noise: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let budget = mechanisms::PrivacyBudget::new(epsilon, delta).map_err(err)?;
    let r = kv_mean(&data, budget, eta, mode(noise), &SeedTree::new(seed)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("estimate", r.estimate)?;
    d.set_item("trunc_low", r.trunc_low)?;
    d.set_item("trunc_high", r.trunc_high)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (x, y, rounds, epsilon, delta, eta=0.05, l=1.0, rho=None, seed=0, noise=true))]
#[allow(clippy::too_many_arguments)]
fn dp_linreg_single(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    rounds: usize,
    epsilon: f64,
    delta: f64,
    eta: f64,
    l: f64,
    rho: Option<f64>,
    seed: u64,
    noise: bool,
) -> PyResult<Vec<f64>> {
    let (x, y) = design(x, y)?;
    let budget = mechanisms::PrivacyBudget::new(epsilon, delta).map_err(err)?;
    let mut cfg = RegressionConfig::new(rounds, l, eta, budget).map_err(err)?;
    cfg.mode = mode(noise);
    if let Some(r) = rho {
        cfg.rho = r;
    }
    py.detach(|| linreg_single(x.view(), y.view(), &cfg, &SeedTree::new(seed)))
        .map(|(b, _)| b.to_vec())
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (x, y, rounds, s, epsilon, delta, eta=0.05, l=1.0, s_prime=None, seed=0, noise=true))]
#[allow(clippy::too_many_arguments)]
fn dp_sparse_single(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    rounds: usize,
    s: usize,
    epsilon: f64,
    delta: f64,
    eta: f64,
    l: f64,
    s_prime: Option<usize>,
    seed: u64,
    noise: bool,
) -> PyResult<Vec<f64>> {
    let (x, y) = design(x, y)?;
    let budget = mechanisms::PrivacyBudget::new(epsilon, delta).map_err(err)?;
    let s_prime = s_prime.unwrap_or_else(|| default_s_prime(s, l, x.ncols()));
    let mut cfg = SparseRegConfig::new(rounds, s_prime, l, eta, budget).map_err(err)?;
    cfg.mode = mode(noise);
    py.detach(|| sparse_single(x.view(), y.view(), &cfg, &SeedTree::new(seed)))
        .map(|(b, _)| b.to_vec())
        .map_err(err)
}

/// Audits a transcript CSV; returns `(ok, [(site, round, rule, detail), ...])`.
#[pyfunction]
fn audit_transcript(csv: &str) -> PyResult<(bool, Vec<(u32, usize, String, String)>)> {
    let tr = Transcript::from_csv(csv).map_err(err)?;
    let v = audit_ledger(&tr, tr.declared);
    Ok((v.ok, v.violations.into_iter().map(|v| (v.site, v.round, v.rule, v.detail)).collect()))
}

/// Slope of log median error against log of `axis` ("n", "K", "epsilon", "inv_epsilon", "d").
#[pyfunction]
#[pyo3(signature = (csv, axis, column="federated"))]
fn fit_rate_slopes(csv: &str, axis: &str, column: &str) -> PyResult<(f64, f64)> {
    let axis = Axis::parse(axis).ok_or_else(|| PyValueError::new_err(format!("unknown axis '{axis}'")))?;
    let column = match column {
        "federated" => ErrorColumn::Federated,
        "target_only" => ErrorColumn::TargetOnly,
        other => return Err(PyValueError::new_err(format!("unknown column '{other}'"))),
    };
    let fit = fit_slopes(&read_rows(csv).map_err(err)?, axis, column).map_err(err)?;
    Ok((fit.slope, fit.std_error))
}

/// A parsed experiment config.
#[pyclass(frozen)]
struct Experiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Experiment {
            cfg: ExperimentConfig::from_toml(text).map_err(err)?,
        })
    }

    fn grid_size(&self) -> PyResult<usize> {
        Ok(self.cfg.grid().map_err(err)?.len())
    }

    /// Runs the sweep and returns the results CSV text.
    fn run_sweep(&self, py: Python<'_>) -> PyResult<String> {
        let cfg = self.cfg.clone();
        py.detach(|| run_sweep(&cfg).and_then(|r| r.to_csv(&cfg))).map_err(err)
    }

    /// First replication at the base point.
    fn simulate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let cfg = self.cfg.clone();
        let (cell, transcript) = py.detach(|| simulate(&cfg)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("err_target_only", cell.row.err_target_only)?;
        d.set_item("err_federated", cell.row.err_federated)?;
        d.set_item("a_recovered", cell.row.a_recovered == 1)?;
        d.set_item("branch", cell.row.branch)?;
        d.set_item("ledger_ok", cell.row.ledger_ok == 1)?;
        if let Some(r) = cell.report {
            d.set_item("estimate", r.estimate)?;
            d.set_item("selected", r.selected)?;
            d.set_item("radius", r.radius)?;
        }
        d.set_item("truth", cell.instance.truth.target)?;
        d.set_item("transcript", transcript.to_csv())?;
        Ok(d)
    }
}

#[pymodule]
#[pyo3(name = "fdp_transfer")]
fn fdp_transfer_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FdpError", m.py().get_type::<FdpError>())?;
    m.add_class::<PrivacyBudget>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(gaussian_noise_std, m)?)?;
    m.add_function(wrap_pyfunction!(private_variance, m)?)?;
    m.add_function(wrap_pyfunction!(hard_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(peeling, m)?)?;
    m.add_function(wrap_pyfunction!(rate_mean, m)?)?;
    m.add_function(wrap_pyfunction!(rate_lowdim, m)?)?;
    m.add_function(wrap_pyfunction!(rate_highdim, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(kv_private_mean, m)?)?;
    m.add_function(wrap_pyfunction!(dp_linreg_single, m)?)?;
    m.add_function(wrap_pyfunction!(dp_sparse_single, m)?)?;
    m.add_function(wrap_pyfunction!(audit_transcript, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rate_slopes, m)?)?;
    Ok(())
}
