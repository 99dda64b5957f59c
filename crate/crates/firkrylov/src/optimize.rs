//! Budgeted minimization of the PML criterion over `(lambda, beta)`.
//!
//! The evaluator contract makes the problem effectively one-dimensional: a
//! single precompute per `beta` buys arbitrarily many `lambda` evaluations,
//! so each probe of the outer search profiles `lambda` on a dense log grid
//! (plus golden-section polish) for free. The outer search over `log beta` is
//! a deterministic coarse-grid pass followed by golden-section refinement
//! until the precompute budget is spent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{
    CompositeOperator, KernelFactor, KernelKind, KernelParams, SystemData, ToeplitzOperator,
};
use crate::pml::{
    pml_direct_precompute_from_ops, pml_eval_from_spectrum, pml_indirect_eval, pml_krylov_eval,
    pml_krylov_precompute, residual_trace_precompute, IndirectConfig, DEFAULT_DIRECT_CAP,
};
use crate::sample::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    Direct,
    Indirect,
    Krylov,
}

impl std::str::FromStr for EvaluatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "indirect" => Ok(Self::Indirect),
            "krylov" => Ok(Self::Krylov),
            other => Err(Error::InvalidParam(format!(
                "unknown evaluator '{other}' (expected direct|indirect|krylov)"
            ))),
        }
    }
}

/// Search domain and evaluator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub beta_range: (f64, f64),
    pub lambda_range: (f64, f64),
    /// Maximum number of precomputes (beta probes).
    pub budget: usize,
    /// Inner lambda grid resolution per probe.
    pub lambda_grid_size: usize,
    pub evaluator: EvaluatorKind,
    pub k: usize,
    pub n_omega: usize,
    /// Residual-trace probes; 0 disables the correction.
    pub n_psi: usize,
    pub k_quad: usize,
    pub kernel_rho: f64,
    pub kernel_c: f64,
    pub direct_cap: usize,
    pub nystrom_rank: usize,
    pub lsqr_tol: f64,
    pub lsqr_maxit: usize,
    pub gh_probes: usize,
    pub mercator_tol: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beta_range: (1e-4, 0.5),
            lambda_range: (1e-6, 1e6),
            budget: 40,
            lambda_grid_size: 50,
            evaluator: EvaluatorKind::Krylov,
            k: 40,
            n_omega: 1,
            n_psi: 3,
            k_quad: 25,
            kernel_rho: 0.9,
            kernel_c: 1.0,
            direct_cap: DEFAULT_DIRECT_CAP,
            nystrom_rank: 50,
            lsqr_tol: 1e-8,
            lsqr_maxit: 500,
            gh_probes: 20,
            mercator_tol: 1e-8,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("beta", self.beta_range), ("lambda", self.lambda_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
                return Err(Error::InvalidParam(format!(
                    "{name} range ({lo}, {hi}) must be positive with lo < hi"
                )));
            }
        }
        if self.budget == 0 {
            return Err(Error::InvalidParam("budget must be >= 1".into()));
        }
        if self.lambda_grid_size == 0 {
            return Err(Error::InvalidParam("lambda grid size must be >= 1".into()));
        }
        Ok(())
    }

    fn indirect_config(&self) -> IndirectConfig {
        IndirectConfig {
            nystrom_rank: self.nystrom_rank,
            lsqr_tol: self.lsqr_tol,
            lsqr_maxit: self.lsqr_maxit,
            gh_probes: self.gh_probes,
            mercator_tol: self.mercator_tol,
            mercator_maxit: 2000,
            seed: self.seed,
        }
    }
}

/// Outcome of one beta probe.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRecord {
    pub beta: f64,
    pub lambda_star: f64,
    pub psi_star: f64,
    /// Set when the lambda minimum sat on a range endpoint.
    pub boundary: bool,
    /// Toeplitz column applications spent by this probe.
    pub matvecs: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchResult {
    pub lambda_star: f64,
    pub beta_star: f64,
    pub psi_star: f64,
    pub trace: Vec<ProbeRecord>,
    pub precompute_count: usize,
    pub matvec_total: u64,
    /// Set when the beta range was widened once around a boundary incumbent.
    pub widened: bool,
}

const GOLDEN: f64 = 0.381_966_011_250_105_2; // (3 - sqrt(5)) / 2
const LAMBDA_LN_TOL: f64 = 1e-3;

/// Minimizes `psi` over `lambda` on a log grid of `grid_size` points, then
/// polishes around the best interior point by golden-section search to a
/// relative lambda tolerance of 1e-3. Returns `(lambda_star, psi_star,
/// at_boundary)`; hitting a range endpoint is flagged rather than refined.
pub fn lambda_profile_min<F>(
    mut eval: F,
    lambda_range: (f64, f64),
    grid_size: usize,
) -> Result<(f64, f64, bool)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (lo, hi) = lambda_range;
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo < hi) {
        return Err(Error::InvalidParam(format!(
            "lambda range ({lo}, {hi}) must be positive with lo < hi"
        )));
    }
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let points: Vec<f64> = if grid_size == 1 {
        vec![(0.5 * (ln_lo + ln_hi)).exp()]
    } else {
        (0..grid_size)
            .map(|i| (ln_lo + (ln_hi - ln_lo) * i as f64 / (grid_size - 1) as f64).exp())
            .collect()
    };
    let mut values = Vec::with_capacity(points.len());
    for &lambda in &points {
        values.push(eval(lambda)?);
    }
    let min_psi = values.iter().cloned().fold(f64::INFINITY, f64::min);
    // Ties at rounding level resolve to the lowest lambda, so a profile that
    // is constant up to floating point reports its boundary.
    let tie_tol = 1e-12 * (1.0 + min_psi.abs());
    let best_idx = values
        .iter()
        .position(|&v| v <= min_psi + tie_tol)
        .unwrap_or(0);
    let mut best_lambda = points[best_idx];
    let mut best_psi = values[best_idx];
    if grid_size == 1 || best_idx == 0 || best_idx == grid_size - 1 {
        return Ok((best_lambda, best_psi, true));
    }

    let mut a = points[best_idx - 1].ln();
    let mut b = points[best_idx + 1].ln();
    let mut x1 = a + GOLDEN * (b - a);
    let mut x2 = b - GOLDEN * (b - a);
    let mut f1 = eval(x1.exp())?;
    let mut f2 = eval(x2.exp())?;
    while b - a > LAMBDA_LN_TOL {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + GOLDEN * (b - a);
            f1 = eval(x1.exp())?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = b - GOLDEN * (b - a);
            f2 = eval(x2.exp())?;
        }
        let (cand_ln, cand_psi) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
        if cand_psi < best_psi {
            best_psi = cand_psi;
            best_lambda = cand_ln.exp();
        }
    }
    Ok((best_lambda, best_psi, false))
}

/// Deterministic outer search over `log beta`: a coarse log-grid pass over
/// `ceil(budget / 2)` points, one optional range widening when the incumbent
/// lands on an endpoint, then golden-section refinement around the incumbent
/// until the budget is spent. Coarse probes run in parallel; results are
/// reduced in grid order.
pub fn search_over_beta<F>(probe: F, cfg: &SearchConfig) -> Result<SearchResult>
where
    F: Fn(f64) -> Result<ProbeRecord> + Sync,
{
    cfg.validate()?;
    let run_probe = |beta: f64| -> Result<ProbeRecord> {
        probe(beta).map_err(|e| Error::InvalidParam(format!("PML probe at beta = {beta:e}: {e}")))
    };

    let coarse_n = cfg.budget.div_ceil(2);
    let grid = |lo: f64, hi: f64, count: usize| -> Vec<f64> {
        if count == 1 {
            vec![(0.5 * (lo.ln() + hi.ln())).exp()]
        } else {
            (0..count)
                .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    };
    let coarse_betas = grid(cfg.beta_range.0, cfg.beta_range.1, coarse_n);
    let mut trace: Vec<ProbeRecord> = coarse_betas
        .par_iter()
        .map(|&beta| run_probe(beta))
        .collect::<Result<Vec<_>>>()?;
    let mut budget_left = cfg.budget - trace.len();

    let incumbent = |trace: &[ProbeRecord]| -> usize {
        let mut best = 0;
        for (i, p) in trace.iter().enumerate() {
            if p.psi_star < trace[best].psi_star {
                best = i;
            }
        }
        best
    };

    // Widen once when the incumbent sits on a range endpoint. The upper
    // extension saturates below 1, the admissible supremum of the kernel
    // decay parameter.
    const BETA_SUP: f64 = 1.0 - 1e-9;
    let mut widened = false;
    if coarse_n > 1 && budget_left > 0 {
        let best = incumbent(&trace);
        let extension = if trace[best].beta <= coarse_betas[0] * (1.0 + 1e-12) {
            let new_lo = (cfg.beta_range.0 / 10.0).max(f64::MIN_POSITIVE);
            Some((new_lo, cfg.beta_range.0))
        } else if trace[best].beta >= coarse_betas[coarse_n - 1] * (1.0 - 1e-12) {
            let new_hi = (cfg.beta_range.1 * 10.0).min(BETA_SUP);
            (new_hi > cfg.beta_range.1).then_some((cfg.beta_range.1, new_hi))
        } else {
            None
        };
        if let Some((lo, hi)) = extension {
            widened = true;
            let extra_n = (coarse_n / 4).clamp(1, budget_left);
            // One grid endpoint coincides with the already probed boundary;
            // keep the extra_n new points on the extension side.
            let mut points = grid(lo, hi, extra_n + 1);
            if hi <= cfg.beta_range.0 {
                points.truncate(extra_n); // extending downward: drop old lo
            } else {
                points.remove(0); // extending upward: drop old hi
            }
            let extra: Vec<ProbeRecord> = points
                .par_iter()
                .map(|&beta| run_probe(beta))
                .collect::<Result<Vec<_>>>()?;
            budget_left -= extra.len();
            trace.extend(extra);
        }
    }

    // Golden-section refinement around the incumbent, bracketed by its probed
    // neighbors.
    if budget_left > 0 {
        let mut betas_sorted: Vec<f64> = trace.iter().map(|p| p.beta).collect();
        betas_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let best_beta = trace[incumbent(&trace)].beta;
        let pos = betas_sorted
            .iter()
            .position(|&b| (b - best_beta).abs() <= f64::EPSILON * best_beta)
            .unwrap_or(0);
        if pos > 0 && pos + 1 < betas_sorted.len() {
            let mut a = betas_sorted[pos - 1].ln();
            let mut b = betas_sorted[pos + 1].ln();
            let mut x1 = a + GOLDEN * (b - a);
            let mut x2 = b - GOLDEN * (b - a);
            let mut f1 = f64::INFINITY;
            let mut f2 = f64::INFINITY;
            let mut have = 0u8;
            while budget_left > 0 && b - a > LAMBDA_LN_TOL {
                if have == 0 {
                    let rec = run_probe(x1.exp())?;
                    f1 = rec.psi_star;
                    trace.push(rec);
                    budget_left -= 1;
                    have = 1;
                    continue;
                }
                if have == 1 {
                    let rec = run_probe(x2.exp())?;
                    f2 = rec.psi_star;
                    trace.push(rec);
                    budget_left -= 1;
                    have = 2;
                    continue;
                }
                if f1 <= f2 {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = a + GOLDEN * (b - a);
                    let rec = run_probe(x1.exp())?;
                    f1 = rec.psi_star;
                    trace.push(rec);
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = b - GOLDEN * (b - a);
                    let rec = run_probe(x2.exp())?;
                    f2 = rec.psi_star;
                    trace.push(rec);
                }
                budget_left -= 1;
            }
        }
    }

    let best = incumbent(&trace);
    Ok(SearchResult {
        lambda_star: trace[best].lambda_star,
        beta_star: trace[best].beta,
        psi_star: trace[best].psi_star,
        precompute_count: trace.len(),
        matvec_total: trace.iter().map(|p| p.matvecs).sum(),
        widened,
        trace,
    })
}

/// Full hyperparameter search on a data record with the chosen kernel family
/// and evaluator. Every probe reuses the same seed, so the sampled `Omega`
/// and probe blocks are common across beta values and the criterion surface
/// is smooth in beta.
pub fn minimize_pml(
    data: &SystemData,
    kernel_kind: KernelKind,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    let n = data.fir_order();
    let y = data.output();
    let probe = |beta: f64| -> Result<ProbeRecord> {
        let params = KernelParams {
            beta,
            rho: cfg.kernel_rho,
            c: cfg.kernel_c,
        };
        let kernel = KernelFactor::from_kind(kernel_kind, n, params)?;
        let phi = ToeplitzOperator::new(data.input().clone(), n)?;
        match cfg.evaluator {
            EvaluatorKind::Direct => {
                let spectrum = pml_direct_precompute_from_ops(&phi, &kernel, y, cfg.direct_cap)?;
                let (lambda_star, psi_star, boundary) = lambda_profile_min(
                    |lambda| pml_eval_from_spectrum(&spectrum, lambda).map(|e| e.psi),
                    cfg.lambda_range,
                    cfg.lambda_grid_size,
                )?;
                Ok(ProbeRecord {
                    beta,
                    lambda_star,
                    psi_star,
                    boundary,
                    matvecs: phi.column_applies(),
                })
            }
            EvaluatorKind::Krylov => {
                let op = CompositeOperator::new(phi, kernel)?;
                let (spectrum, lanczos) =
                    pml_krylov_precompute(&op, y, cfg.n_omega, cfg.k, cfg.seed)?;
                let model = if cfg.n_psi > 0 {
                    Some(residual_trace_precompute(
                        &op,
                        &lanczos,
                        cfg.n_psi,
                        cfg.k_quad,
                        derive_seed(cfg.seed, 101),
                    )?)
                } else {
                    None
                };
                let (lambda_star, psi_star, boundary) = lambda_profile_min(
                    |lambda| pml_krylov_eval(&spectrum, model.as_ref(), lambda).map(|e| e.psi),
                    cfg.lambda_range,
                    cfg.lambda_grid_size,
                )?;
                Ok(ProbeRecord {
                    beta,
                    lambda_star,
                    psi_star,
                    boundary,
                    matvecs: op.phi().column_applies(),
                })
            }
            EvaluatorKind::Indirect => {
                let icfg = cfg.indirect_config();
                let (lambda_star, psi_star, boundary) = lambda_profile_min(
                    |lambda| pml_indirect_eval(&phi, &kernel, y, lambda, &icfg).map(|e| e.psi),
                    cfg.lambda_range,
                    cfg.lambda_grid_size,
                )?;
                Ok(ProbeRecord {
                    beta,
                    lambda_star,
                    psi_star,
                    boundary,
                    matvecs: phi.column_applies(),
                })
            }
        }
    };
    search_over_beta(probe, cfg)
}
