use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linops::{KernelFactor, ToeplitzOperator};
use crate::sample::{derive_seed, gaussian_matrix, gaussian_vector, rademacher_vector, rng_from_seed};

use super::PmlEvaluation;

/// Knobs of the indirect evaluator. All randomness is derived from `seed`,
/// so repeated calls with the same configuration are bit-identical.
#[derive(Debug, Clone)]
pub struct IndirectConfig {
    pub nystrom_rank: usize,
    pub lsqr_tol: f64,
    pub lsqr_maxit: usize,
    pub gh_probes: usize,
    pub mercator_tol: f64,
    pub mercator_maxit: usize,
    pub seed: u64,
}

impl Default for IndirectConfig {
    fn default() -> Self {
        Self {
            nystrom_rank: 50,
            lsqr_tol: 1e-8,
            lsqr_maxit: 500,
            gh_probes: 20,
            mercator_tol: 1e-8,
            mercator_maxit: 2000,
            seed: 0,
        }
    }
}

/// `Phi_tilde = Phi L` and its Gram matrix `G = Phi_tilde' Phi_tilde`,
/// accessed through the structured factors only.
struct PhiTilde<'a> {
    phi: &'a ToeplitzOperator,
    kernel: &'a KernelFactor,
}

impl PhiTilde<'_> {
    fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.phi.apply(&self.kernel.apply_l(x)?)
    }

    fn apply_transpose(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.kernel.apply_lt(&self.phi.apply_transpose(z)?)
    }

    fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.apply_transpose(&self.apply(x)?)
    }
}

/// Truncated eigendecomposition of a randomized Nystrom approximation of the
/// Gram matrix.
struct NystromEig {
    u: DMatrix<f64>,
    lam: DVector<f64>,
}

fn nystrom_of_gram(pt: &PhiTilde, rank: usize, seed: u64) -> Result<Option<NystromEig>> {
    let n = pt.kernel.order();
    let ell = rank.min(n);
    if ell == 0 {
        return Ok(None);
    }
    let omega = gaussian_matrix(&mut rng_from_seed(seed), n, ell);
    let y = pt.gram(&omega)?;
    let y_norm = y.norm();
    if y_norm == 0.0 {
        // The sketch of a nonzero PSD map is nonzero almost surely; a zero
        // sketch means the Gram operator itself vanishes.
        return Ok(None);
    }
    // Shifted Nystrom for numerical stability.
    let mut nu = f64::EPSILON * y_norm;
    for _ in 0..6 {
        let y_nu = &y + &omega * nu;
        let gram_small = omega.transpose() * &y_nu;
        let gram_small = (&gram_small + gram_small.transpose()) * 0.5;
        if let Some(chol) = gram_small.cholesky() {
            if let Some(solved) = chol.l().solve_lower_triangular(&y_nu.transpose()) {
                let b = solved.transpose();
                let svd = b.svd(true, false);
                let u_all = svd.u.ok_or(Error::EigFailure)?;
                let mut pairs: Vec<(f64, usize)> = svd
                    .singular_values
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| ((s * s - nu).max(0.0), i))
                    .collect();
                pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                let top = pairs[0].0;
                let kept: Vec<(f64, usize)> = pairs
                    .into_iter()
                    .filter(|(v, _)| *v > 1e-14 * top && *v > 0.0)
                    .collect();
                if kept.is_empty() {
                    return Ok(None);
                }
                let mut u = DMatrix::zeros(n, kept.len());
                let mut lam = DVector::zeros(kept.len());
                for (dst, (v, src)) in kept.iter().enumerate() {
                    u.column_mut(dst).copy_from(&u_all.column(*src));
                    lam[dst] = *v;
                }
                return Ok(Some(NystromEig { u, lam }));
            }
        }
        nu *= 10.0;
    }
    Err(Error::EigFailure)
}

/// Shift-aware Nystrom preconditioner of `lambda I + G`: on the captured
/// eigenspace `P` scales direction `i` by `(lam_i + lambda) / (lam_ell +
/// lambda)` and acts as the identity elsewhere, so `P^{-1/2} (lambda I + G)
/// P^{-1/2}` clusters the captured spectrum.
struct Preconditioner {
    eig: Option<NystromEig>,
    lambda: f64,
}

impl Preconditioner {
    fn floor_eig(&self) -> f64 {
        match &self.eig {
            Some(e) => e.lam[e.lam.len() - 1],
            None => 0.0,
        }
    }

    /// `P^{-1/2} X`.
    fn apply_inv_sqrt(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.eig {
            None => x.clone(),
            Some(e) => {
                let floor = self.floor_eig() + self.lambda;
                let coeffs = e.lam.map(|l| (floor / (l + self.lambda)).sqrt() - 1.0);
                let proj = e.u.transpose() * x;
                let mut scaled = proj.clone();
                for (r, c) in coeffs.iter().enumerate() {
                    scaled.row_mut(r).scale_mut(*c);
                }
                x + &e.u * scaled
            }
        }
    }

    /// `Trace(log P)` in closed form.
    fn trace_log(&self) -> f64 {
        match &self.eig {
            None => 0.0,
            Some(e) => {
                let floor = self.floor_eig() + self.lambda;
                e.lam.iter().map(|&l| ((l + self.lambda) / floor).ln()).sum()
            }
        }
    }

    /// Smallest eigenvalue of `P^{-1}`, a rigorous lower bound ingredient for
    /// the preconditioned spectrum.
    fn min_inv_eig(&self) -> f64 {
        match &self.eig {
            None => 1.0,
            Some(e) => (self.floor_eig() + self.lambda) / (e.lam[0] + self.lambda),
        }
    }
}

/// LSQR on the damped, right-preconditioned least-squares problem
/// `min || [Phi_tilde; sqrt(lambda) I] P^{-1/2} z - [y; 0] ||`, returning
/// `x = P^{-1/2} z`, the solution of `(lambda I + G) x = Phi_tilde' y`.
fn lsqr_regularized(
    pt: &PhiTilde,
    precond: &Preconditioner,
    y: &DVector<f64>,
    rhs: &DVector<f64>,
    lambda: f64,
    cfg: &IndirectConfig,
) -> Result<(DVector<f64>, usize)> {
    let n = pt.kernel.order();
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok((DVector::zeros(n), 0));
    }
    let sqrt_lambda = lambda.sqrt();
    let as_mat = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());

    // B z = [Phi_tilde w; sqrt(lambda) w] with w = P^{-1/2} z.
    let apply_b = |z: &DVector<f64>| -> Result<(DVector<f64>, DVector<f64>)> {
        let w = precond.apply_inv_sqrt(&as_mat(z));
        let top = pt.apply(&w)?;
        Ok((top.column(0).into_owned(), w.column(0) * sqrt_lambda))
    };
    // B' [u1; u2] = P^{-1/2} (Phi_tilde' u1 + sqrt(lambda) u2).
    let apply_bt = |u1: &DVector<f64>, u2: &DVector<f64>| -> Result<DVector<f64>> {
        let t = pt.apply_transpose(&as_mat(u1))?;
        let combined = t.column(0) + u2 * sqrt_lambda;
        Ok(precond
            .apply_inv_sqrt(&DMatrix::from_column_slice(n, 1, combined.as_slice()))
            .column(0)
            .into_owned())
    };
    let true_residual = |z: &DVector<f64>| -> Result<(DVector<f64>, f64)> {
        let x = precond.apply_inv_sqrt(&as_mat(z)).column(0).into_owned();
        let gx = pt.gram(&as_mat(&x))?;
        let res = (gx.column(0) + &x * lambda) - rhs;
        Ok((x, res.norm() / rhs_norm))
    };

    // b = [y; 0].
    let mut u1 = y.clone();
    let mut u2: DVector<f64> = DVector::zeros(n);
    let beta0 = (u1.norm_squared() + u2.norm_squared()).sqrt();
    u1 /= beta0;
    u2 /= beta0;
    let mut v = apply_bt(&u1, &u2)?;
    let alpha0 = v.norm();
    if alpha0 == 0.0 {
        return Ok((DVector::zeros(n), 0));
    }
    v /= alpha0;
    let mut w = v.clone();
    let mut z = DVector::zeros(n);
    let mut phibar = beta0;
    let mut rhobar = alpha0;
    let bt_b_norm = alpha0 * beta0;
    let mut alpha = alpha0;
    let mut residual_estimate = 1.0;

    for iter in 1..=cfg.lsqr_maxit {
        let (bv1, bv2) = apply_b(&v)?;
        u1 = bv1 - &u1 * alpha;
        u2 = bv2 - &u2 * alpha;
        let beta = (u1.norm_squared() + u2.norm_squared()).sqrt();
        if beta > 0.0 {
            u1 /= beta;
            u2 /= beta;
        }
        let mut v_next = apply_bt(&u1, &u2)?;
        v_next -= &v * beta;
        alpha = v_next.norm();
        let rho = rhobar.hypot(beta);
        let c = rhobar / rho;
        let s = beta / rho;
        let theta = s * alpha;
        rhobar = -c * alpha;
        let phi = c * phibar;
        phibar *= s;
        z += &w * (phi / rho);
        if alpha > 0.0 {
            v = v_next / alpha;
        }
        w = &v - &w * (theta / rho);

        residual_estimate = (phibar * alpha * c.abs()) / bt_b_norm;
        if residual_estimate <= cfg.lsqr_tol || alpha == 0.0 || beta == 0.0 {
            let (x, relres) = true_residual(&z)?;
            if relres <= cfg.lsqr_tol {
                return Ok((x, iter));
            }
            if alpha == 0.0 || beta == 0.0 {
                // Exact breakdown: the Krylov space is exhausted.
                return Ok((x, iter));
            }
        }
    }
    let (_, relres) = true_residual(&z)?;
    Err(Error::NonConvergence {
        what: "LSQR",
        residual: relres.max(residual_estimate),
        iterations: cfg.lsqr_maxit,
    })
}

/// `Trace(log(lambda I + G))` by splitting off `Trace(log P)` in closed form
/// and estimating the preconditioned remainder with a Girard-Hutchinson
/// estimator on an adaptively truncated Mercator series of `log(I - X)`,
/// `X = I - M / s`, `M = P^{-1/2} (lambda I + G) P^{-1/2}`.
fn trace_log_shifted_gram(
    pt: &PhiTilde,
    precond: &Preconditioner,
    lambda: f64,
    cfg: &IndirectConfig,
) -> Result<f64> {
    let n = pt.kernel.order();
    let apply_m = |x: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let w = precond.apply_inv_sqrt(x);
        let gw = pt.gram(&w)?;
        Ok(precond.apply_inv_sqrt(&(gw + w * lambda)))
    };

    // Largest eigenvalue of M by power iteration, inflated for safety; the
    // smallest is lower-bounded through lambda * lambda_min(P^{-1}).
    let mut v = gaussian_vector(&mut rng_from_seed(derive_seed(cfg.seed, 2)), n);
    v /= v.norm();
    let mut rayleigh = lambda;
    for _ in 0..15 {
        let mv = apply_m(&DMatrix::from_column_slice(n, 1, v.as_slice()))?;
        let mv = mv.column(0).into_owned();
        rayleigh = v.dot(&mv);
        let norm = mv.norm();
        if norm == 0.0 {
            break;
        }
        v = mv / norm;
    }
    let lam_max = rayleigh.max(lambda) * 1.05;
    let lam_min_lb = lambda * precond.min_inv_eig();
    let scale = 0.5 * (lam_max + lam_min_lb);
    let radius_bound = (lam_max - lam_min_lb) / (lam_max + lam_min_lb);
    if radius_bound.is_nan() || radius_bound >= 1.0 - 1e-12 {
        return Err(Error::MercatorDivergence {
            radius: radius_bound,
        });
    }

    // Rademacher probes keep the estimator exact on the scalar component of
    // log(M / s), which dominates once the preconditioner has clustered the
    // spectrum.
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 3));
    let probes = cfg.gh_probes.max(1);
    let mut base = DMatrix::zeros(n, probes);
    for j in 0..probes {
        base.column_mut(j)
            .copy_from(&rademacher_vector(&mut rng, n));
    }
    let mut power = base.clone();
    let mut acc = 0.0;
    let mut first_term_mag = f64::INFINITY;
    let mut below_tol_streak = 0;
    for k in 1..=cfg.mercator_maxit {
        // power <- X power = power - M power / s.
        let mpower = apply_m(&power)?;
        power = &power - mpower / scale;
        let mut dot_sum = 0.0;
        for j in 0..probes {
            dot_sum += base.column(j).dot(&power.column(j));
        }
        let term = -dot_sum / (probes as f64 * k as f64);
        acc += term;
        let mag = term.abs();
        if k == 1 {
            first_term_mag = mag.max(f64::MIN_POSITIVE);
        } else if mag > 10.0 * first_term_mag.max(1.0) {
            return Err(Error::MercatorDivergence {
                radius: radius_bound,
            });
        }
        if mag <= cfg.mercator_tol * (1.0 + acc.abs()) {
            below_tol_streak += 1;
            if below_tol_streak >= 2 {
                return Ok(precond.trace_log() + n as f64 * scale.ln() + acc);
            }
        } else {
            below_tol_streak = 0;
        }
    }
    Err(Error::NonConvergence {
        what: "Mercator series",
        residual: radius_bound,
        iterations: cfg.mercator_maxit,
    })
}

/// Indirect evaluation of the PML criterion: the quadratic form through the
/// Sherman-Morrison-Woodbury identity
///
/// ```text
/// y' (lambda I + A)^{-1} y = lambda^{-1} ( ||y||^2 - y' Phi_tilde x ),
/// (lambda I + G) x = Phi_tilde' y,
/// ```
///
/// solved by preconditioned LSQR, and the trace through the
/// Weinstein-Aronszajn identity
///
/// ```text
/// Trace(log(lambda I + A)) = Trace(log(lambda I + G)) + (m - n) log(lambda).
/// ```
///
/// Everything is recomputed from scratch for each lambda.
pub fn pml_indirect_eval(
    phi: &ToeplitzOperator,
    kernel: &KernelFactor,
    y: &DVector<f64>,
    lambda: f64,
    cfg: &IndirectConfig,
) -> Result<PmlEvaluation> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::NonPositive("lambda"));
    }
    let m = phi.num_rows();
    let n = phi.num_cols();
    if kernel.order() != n {
        return Err(Error::Dimension {
            what: "indirect evaluator kernel order",
            expected: n,
            got: kernel.order(),
        });
    }
    if y.len() != m {
        return Err(Error::Dimension {
            what: "indirect evaluator observation length",
            expected: m,
            got: y.len(),
        });
    }
    let pt = PhiTilde { phi, kernel };
    let rhs = pt
        .apply_transpose(&DMatrix::from_column_slice(m, 1, y.as_slice()))?
        .column(0)
        .into_owned();
    let y_norm_sq = y.norm_squared();

    let eig = nystrom_of_gram(&pt, cfg.nystrom_rank, derive_seed(cfg.seed, 1))?;
    let gram_is_zero = eig.is_none() && rhs.norm() == 0.0;
    let precond = Preconditioner { eig, lambda };

    let (x, _iters) = lsqr_regularized(&pt, &precond, y, &rhs, lambda, cfg)?;
    let quad = (y_norm_sq - rhs.dot(&x)) / lambda;
    if quad.is_nan() || quad <= 0.0 {
        return Err(Error::NonPositive("quadratic form (is y zero?)"));
    }

    let trace_gram = if gram_is_zero {
        n as f64 * lambda.ln()
    } else {
        trace_log_shifted_gram(&pt, &precond, lambda, cfg)?
    };
    let trace = trace_gram + (m - n) as f64 * lambda.ln();

    let quad_term = quad.ln();
    let trace_term = trace / m as f64;
    Ok(PmlEvaluation {
        psi: quad_term + trace_term,
        quad_term,
        trace_term,
        nu_star: quad / m as f64,
        lambda,
        beta: kernel.params().beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::SystemData;
    use crate::pml::{pml_direct_precompute, pml_eval_from_spectrum};
    use crate::sample::gaussian_vector;

    fn parts(seed: u64, m: usize, n: usize, beta: f64) -> (ToeplitzOperator, KernelFactor, DVector<f64>) {
        let mut rng = rng_from_seed(seed);
        let u = gaussian_vector(&mut rng, m);
        let y = gaussian_vector(&mut rng, m);
        (
            ToeplitzOperator::new(u, n).unwrap(),
            KernelFactor::tc(n, beta).unwrap(),
            y,
        )
    }

    #[test]
    fn zero_phi_tilde_is_exact() {
        let m = 20;
        let n = 6;
        let phi = ToeplitzOperator::new(DVector::zeros(m), n).unwrap();
        let kernel = KernelFactor::tc(n, 0.5).unwrap();
        let y = gaussian_vector(&mut rng_from_seed(7), m);
        let cfg = IndirectConfig::default();
        for lambda in [0.3, 1.0, 42.0] {
            let e = pml_indirect_eval(&phi, &kernel, &y, lambda, &cfg).unwrap();
            let quad_want = y.norm_squared() / lambda;
            let trace_want = m as f64 * lambda.ln();
            assert!((e.nu_star * m as f64 - quad_want).abs() <= 1e-14 * quad_want.abs());
            assert!((e.trace_term * m as f64 - trace_want).abs() <= 1e-13 * trace_want.abs());
        }
    }

    #[test]
    fn matches_direct_evaluator_m60_n15() {
        let (phi, kernel, y) = parts(31, 60, 15, 0.8);
        let data = SystemData::new(phi.input().clone(), y.clone(), 15, None).unwrap();
        let direct = pml_direct_precompute(&data, &kernel).unwrap();
        let cfg = IndirectConfig {
            gh_probes: 50,
            seed: 5,
            ..IndirectConfig::default()
        };
        for lambda in [0.5, 5.0, 500.0] {
            let ind = pml_indirect_eval(&phi, &kernel, &y, lambda, &cfg).unwrap();
            let dir = pml_eval_from_spectrum(&direct, lambda).unwrap();
            let quad_rel =
                (ind.nu_star - dir.nu_star).abs() / dir.nu_star.abs();
            let trace_rel = (ind.trace_term - dir.trace_term).abs()
                / dir.trace_term.abs().max(1e-3);
            assert!(quad_rel <= 1e-6, "lambda={lambda}: quad rel {quad_rel:e}");
            assert!(trace_rel <= 1e-3, "lambda={lambda}: trace rel {trace_rel:e}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (phi, kernel, y) = parts(3, 40, 10, 0.7);
        let cfg = IndirectConfig {
            seed: 99,
            ..IndirectConfig::default()
        };
        let a = pml_indirect_eval(&phi, &kernel, &y, 2.5, &cfg).unwrap();
        let b = pml_indirect_eval(&phi, &kernel, &y, 2.5, &cfg).unwrap();
        assert_eq!(a.psi.to_bits(), b.psi.to_bits());
        assert_eq!(a.nu_star.to_bits(), b.nu_star.to_bits());
        assert_eq!(a.trace_term.to_bits(), b.trace_term.to_bits());
    }

    #[test]
    fn lsqr_nonconvergence_carries_residual() {
        let (phi, kernel, y) = parts(17, 50, 12, 0.9);
        let cfg = IndirectConfig {
            lsqr_maxit: 1,
            lsqr_tol: 1e-14,
            nystrom_rank: 0,
            ..IndirectConfig::default()
        };
        match pml_indirect_eval(&phi, &kernel, &y, 0.01, &cfg) {
            Err(Error::NonConvergence {
                what, residual, ..
            }) => {
                assert_eq!(what, "LSQR");
                assert!(residual > 0.0);
            }
            other => panic!("expected LSQR non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn mercator_cap_errors_out() {
        // Without a preconditioner and with a tight term cap, the series
        // cannot reach the tolerance on an ill-conditioned Gram matrix.
        let (phi, kernel, y) = parts(23, 60, 20, 0.95);
        let cfg = IndirectConfig {
            nystrom_rank: 0,
            mercator_maxit: 2,
            seed: 1,
            ..IndirectConfig::default()
        };
        let err = pml_indirect_eval(&phi, &kernel, &y, 1e-3, &cfg).unwrap_err();
        match err {
            Error::NonConvergence { what, .. } => assert_eq!(what, "Mercator series"),
            Error::MercatorDivergence { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_nonpositive_lambda() {
        let (phi, kernel, y) = parts(2, 30, 8, 0.6);
        let cfg = IndirectConfig::default();
        assert!(pml_indirect_eval(&phi, &kernel, &y, 0.0, &cfg).is_err());
    }
}
