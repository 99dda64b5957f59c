//! Python bindings for the core estimation pipeline: synthetic data
//! generation, the three PML evaluators behind a precompute/evaluate split,
//! and budgeted identification.

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use firkrylov::datagen::{self, SynthSpec};
use firkrylov::estimate;
use firkrylov::linops::{
    CompositeOperator, KernelFactor, KernelKind, KernelParams, SystemData, ToeplitzOperator,
};
use firkrylov::optimize::{minimize_pml, EvaluatorKind, SearchConfig};
use firkrylov::pml::{
    pml_direct_precompute_from_ops, pml_eval_from_spectrum, pml_indirect_eval, pml_krylov_eval,
    pml_krylov_precompute, residual_trace_precompute, IndirectConfig, PmlSpectrum,
    ResidualTraceModel, DEFAULT_DIRECT_CAP,
};
use firkrylov::sample::derive_seed;

fn err_py(err: firkrylov::Error) -> PyErr {
    match err {
        firkrylov::Error::InvalidParam(_)
        | firkrylov::Error::Dimension { .. }
        | firkrylov::Error::NonPositive(_)
        | firkrylov::Error::CapExceeded { .. } => PyValueError::new_err(err.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn kernel_from(kind: &str, n: usize, beta: f64, rho: f64, c: f64) -> PyResult<KernelFactor> {
    let kind = match kind {
        "tc" => KernelKind::Tc,
        "dc" => KernelKind::Dc,
        "ss" => KernelKind::Ss,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown kernel '{other}' (expected tc|dc|ss)"
            )))
        }
    };
    KernelFactor::from_kind(kind, n, KernelParams { beta, rho, c }).map_err(err_py)
}

fn system_from(u: Vec<f64>, y: Vec<f64>, n: usize) -> PyResult<SystemData> {
    SystemData::new(DVector::from_vec(u), DVector::from_vec(y), n, None).map_err(err_py)
}

/// Impulse response of G(z) = (1 - a z^-1)^-2, h_j = (j + 1) a^j.
#[pyfunction]
fn true_fir(a: f64, n: usize) -> PyResult<Vec<f64>> {
    Ok(datagen::true_fir(a, n).map_err(err_py)?.as_slice().to_vec())
}

/// Generate a synthetic record; returns (u, y, theta_true). Pass
/// snr=float('inf') for noiseless output.
#[pyfunction]
#[pyo3(signature = (a=0.2, m=10_000, n=2000, snr=10.0, seed=0, snr_db=false))]
fn generate_system(
    a: f64,
    m: usize,
    n: usize,
    snr: f64,
    seed: u64,
    snr_db: bool,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let spec = SynthSpec {
        a,
        m,
        n,
        snr,
        snr_is_db: snr_db,
        seed,
    };
    let data = datagen::generate(&spec).map_err(err_py)?;
    Ok((
        data.input().as_slice().to_vec(),
        data.output().as_slice().to_vec(),
        data.theta_true()
            .map(|t| t.as_slice().to_vec())
            .unwrap_or_default(),
    ))
}

/// Fit metric: 100 (1 - ||theta_hat - theta|| / ||theta - mean(theta)||).
#[pyfunction]
fn fit_metric(theta_hat: Vec<f64>, theta_true: Vec<f64>) -> PyResult<f64> {
    estimate::fit_metric(
        &DVector::from_vec(theta_hat),
        &DVector::from_vec(theta_true),
    )
    .map_err(err_py)
}

/// A precomputed PML evaluator: one factorization, arbitrarily many lambda
/// evaluations at O(r) cost.
#[pyclass]
struct PmlModel {
    spectrum: PmlSpectrum,
    residual: Option<ResidualTraceModel>,
}

#[pymethods]
impl PmlModel {
    /// Direct (economy SVD) precompute.
    #[staticmethod]
    #[pyo3(signature = (u, y, n, kernel="tc", beta=0.9, rho=0.9, c=1.0))]
    fn direct(
        u: Vec<f64>,
        y: Vec<f64>,
        n: usize,
        kernel: &str,
        beta: f64,
        rho: f64,
        c: f64,
    ) -> PyResult<Self> {
        let data = system_from(u, y, n)?;
        let kf = kernel_from(kernel, n, beta, rho, c)?;
        let phi = ToeplitzOperator::new(data.input().clone(), n).map_err(err_py)?;
        let spectrum =
            pml_direct_precompute_from_ops(&phi, &kf, data.output(), DEFAULT_DIRECT_CAP)
                .map_err(err_py)?;
        Ok(Self {
            spectrum,
            residual: None,
        })
    }

    /// Krylov-augmented precompute with optional residual trace correction
    /// (n_psi = 0 disables it).
    #[staticmethod]
    #[pyo3(signature = (u, y, n, kernel="tc", beta=0.9, k=40, n_omega=1, n_psi=3,
                        k_quad=25, seed=0, rho=0.9, c=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn krylov(
        u: Vec<f64>,
        y: Vec<f64>,
        n: usize,
        kernel: &str,
        beta: f64,
        k: usize,
        n_omega: usize,
        n_psi: usize,
        k_quad: usize,
        seed: u64,
        rho: f64,
        c: f64,
    ) -> PyResult<Self> {
        let data = system_from(u, y, n)?;
        let kf = kernel_from(kernel, n, beta, rho, c)?;
        let phi = ToeplitzOperator::new(data.input().clone(), n).map_err(err_py)?;
        let op = CompositeOperator::new(phi, kf).map_err(err_py)?;
        let (spectrum, lanczos) =
            pml_krylov_precompute(&op, data.output(), n_omega, k, seed).map_err(err_py)?;
        let residual = if n_psi > 0 {
            Some(
                residual_trace_precompute(&op, &lanczos, n_psi, k_quad, derive_seed(seed, 101))
                    .map_err(err_py)?,
            )
        } else {
            None
        };
        Ok(Self { spectrum, residual })
    }

    /// Evaluate the criterion; returns (psi, quad_term, trace_term, nu_star).
    fn eval(&self, lambda: f64) -> PyResult<(f64, f64, f64, f64)> {
        let e = match &self.residual {
            Some(model) => pml_krylov_eval(&self.spectrum, Some(model), lambda).map_err(err_py)?,
            None => pml_eval_from_spectrum(&self.spectrum, lambda).map_err(err_py)?,
        };
        Ok((e.psi, e.quad_term, e.trace_term, e.nu_star))
    }

    /// Effective rank of the precomputed spectrum.
    #[getter]
    fn rank(&self) -> usize {
        self.spectrum.rank()
    }
}

/// One-shot indirect evaluation (recomputed from scratch per lambda);
/// returns (psi, quad_term, trace_term, nu_star).
#[pyfunction]
#[pyo3(signature = (u, y, n, lam, kernel="tc", beta=0.9, seed=0, nystrom_rank=50,
                    gh_probes=20, rho=0.9, c=1.0))]
#[allow(clippy::too_many_arguments)]
fn indirect_eval(
    u: Vec<f64>,
    y: Vec<f64>,
    n: usize,
    lam: f64,
    kernel: &str,
    beta: f64,
    seed: u64,
    nystrom_rank: usize,
    gh_probes: usize,
    rho: f64,
    c: f64,
) -> PyResult<(f64, f64, f64, f64)> {
    let data = system_from(u, y, n)?;
    let kf = kernel_from(kernel, n, beta, rho, c)?;
    let phi = ToeplitzOperator::new(data.input().clone(), n).map_err(err_py)?;
    let cfg = IndirectConfig {
        nystrom_rank,
        gh_probes,
        seed,
        ..IndirectConfig::default()
    };
    let e = pml_indirect_eval(&phi, &kf, data.output(), lam, &cfg).map_err(err_py)?;
    Ok((e.psi, e.quad_term, e.trace_term, e.nu_star))
}

/// Outcome of an identification run.
#[pyclass]
struct IdentifyResult {
    #[pyo3(get)]
    lambda_star: f64,
    #[pyo3(get)]
    beta_star: f64,
    #[pyo3(get)]
    psi_star: f64,
    #[pyo3(get)]
    nu_star: f64,
    #[pyo3(get)]
    sigma2_star: f64,
    #[pyo3(get)]
    fit: Option<f64>,
    #[pyo3(get)]
    theta_hat: Vec<f64>,
    #[pyo3(get)]
    precompute_count: usize,
    #[pyo3(get)]
    matvec_total: u64,
}

/// Budgeted PML minimization followed by the posterior-mean FIR estimate.
#[pyfunction]
#[pyo3(signature = (u, y, n, kernel="tc", evaluator="krylov", budget=40,
                    beta_range=(1e-4, 0.5), lambda_range=(1e-6, 1e6),
                    lambda_grid_size=50, k=40, n_omega=1, n_psi=3, seed=0,
                    theta_true=None))]
#[allow(clippy::too_many_arguments)]
fn identify(
    u: Vec<f64>,
    y: Vec<f64>,
    n: usize,
    kernel: &str,
    evaluator: &str,
    budget: usize,
    beta_range: (f64, f64),
    lambda_range: (f64, f64),
    lambda_grid_size: usize,
    k: usize,
    n_omega: usize,
    n_psi: usize,
    seed: u64,
    theta_true: Option<Vec<f64>>,
) -> PyResult<IdentifyResult> {
    let truth = theta_true.map(DVector::from_vec);
    let data = SystemData::new(DVector::from_vec(u), DVector::from_vec(y), n, truth)
        .map_err(err_py)?;
    let kernel_kind = match kernel {
        "tc" => KernelKind::Tc,
        "dc" => KernelKind::Dc,
        "ss" => KernelKind::Ss,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown kernel '{other}' (expected tc|dc|ss)"
            )))
        }
    };
    let evaluator: EvaluatorKind = evaluator.parse().map_err(err_py)?;
    let cfg = SearchConfig {
        beta_range,
        lambda_range,
        budget,
        lambda_grid_size,
        evaluator,
        k,
        n_omega,
        n_psi,
        seed,
        ..SearchConfig::default()
    };
    let search = minimize_pml(&data, kernel_kind, &cfg).map_err(err_py)?;

    let kf = kernel_from(kernel, n, search.beta_star, cfg.kernel_rho, cfg.kernel_c)?;
    let phi = ToeplitzOperator::new(data.input().clone(), n).map_err(err_py)?;
    let op = CompositeOperator::new(phi, kf).map_err(err_py)?;
    let (spectrum, _) =
        pml_krylov_precompute(&op, data.output(), n_omega, k, seed).map_err(err_py)?;
    let eval = pml_eval_from_spectrum(&spectrum, search.lambda_star).map_err(err_py)?;
    let theta_hat =
        estimate::posterior_mean(&op, data.output(), search.lambda_star).map_err(err_py)?;
    let fit = match data.theta_true() {
        Some(truth) => Some(estimate::fit_metric(&theta_hat, truth).map_err(err_py)?),
        None => None,
    };
    Ok(IdentifyResult {
        lambda_star: search.lambda_star,
        beta_star: search.beta_star,
        psi_star: search.psi_star,
        nu_star: eval.nu_star,
        sigma2_star: search.lambda_star * eval.nu_star,
        fit,
        theta_hat: theta_hat.as_slice().to_vec(),
        precompute_count: search.precompute_count,
        matvec_total: search.matvec_total,
    })
}

#[pymodule]
fn firkrylov_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(true_fir, m)?)?;
    m.add_function(wrap_pyfunction!(generate_system, m)?)?;
    m.add_function(wrap_pyfunction!(fit_metric, m)?)?;
    m.add_function(wrap_pyfunction!(indirect_eval, m)?)?;
    m.add_function(wrap_pyfunction!(identify, m)?)?;
    m.add_class::<PmlModel>()?;
    m.add_class::<IdentifyResult>()?;
    Ok(())
}
