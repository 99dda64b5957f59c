//! FIR recovery from optimized hyperparameters: the posterior-mean estimate
//! `theta_hat = K Phi' (lambda I + A)^{-1} y`, the recovered noise scales,
//! and the fit metric.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linops::{CompositeOperator, LinearOp};

/// Relative-residual tolerance of the conjugate gradient solve.
pub const CG_TOL: f64 = 1e-10;
/// Iteration-cap floor of the conjugate gradient solve; the effective cap
/// grows with the operator rank, since exact termination needs one step per
/// eigenvalue above the shift and rounding delays it by a small factor.
pub const CG_MAXIT: usize = 2000;

fn cg_cap(op: &CompositeOperator) -> usize {
    CG_MAXIT.max(10 * op.phi().num_cols().min(op.dim()))
}

/// The estimated impulse response with the hyperparameters it was produced
/// from. `sigma2_star = lambda_star * nu_star` by construction.
#[derive(Debug, Clone)]
pub struct FirEstimate {
    pub theta_hat: DVector<f64>,
    pub nu_star: f64,
    pub sigma2_star: f64,
    pub lambda_star: f64,
    pub beta_star: f64,
    pub fit: Option<f64>,
}

impl FirEstimate {
    pub fn new(
        theta_hat: DVector<f64>,
        nu_star: f64,
        lambda_star: f64,
        beta_star: f64,
        fit: Option<f64>,
    ) -> Result<Self> {
        let sigma2_star = lambda_star * nu_star;
        let finite = theta_hat.iter().all(|v| v.is_finite())
            && nu_star.is_finite()
            && sigma2_star.is_finite()
            && lambda_star.is_finite()
            && beta_star.is_finite()
            && fit.is_none_or(|f| f.is_finite());
        if !finite {
            return Err(Error::NonFinite("FIR estimate"));
        }
        Ok(Self {
            theta_hat,
            nu_star,
            sigma2_star,
            lambda_star,
            beta_star,
            fit,
        })
    }
}

/// Matrix-free conjugate gradients on `(lambda I + A) x = y`.
fn cg_shifted(
    op: &dyn LinearOp,
    y: &DVector<f64>,
    lambda: f64,
    tol: f64,
    maxit: usize,
) -> Result<DVector<f64>> {
    let m = op.dim();
    let y_norm = y.norm();
    if y_norm == 0.0 {
        return Ok(DVector::zeros(m));
    }
    let mut x = DVector::zeros(m);
    let mut r = y.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    for _ in 0..maxit {
        let ap_mat = op.apply_mat(&DMatrix::from_column_slice(m, 1, p.as_slice()))?;
        let w = ap_mat.column(0) + &p * lambda;
        let alpha = rr / p.dot(&w);
        if !alpha.is_finite() {
            return Err(Error::NonFinite("conjugate gradient step"));
        }
        x += &p * alpha;
        r -= w * alpha;
        let rr_next = r.norm_squared();
        if rr_next.sqrt() <= tol * y_norm {
            return Ok(x);
        }
        p = &r + &p * (rr_next / rr);
        rr = rr_next;
    }
    Err(Error::NonConvergence {
        what: "conjugate gradients",
        residual: rr.sqrt() / y_norm,
        iterations: maxit,
    })
}

/// Posterior-mean FIR estimate `theta_hat = K Phi' (lambda I + A)^{-1} y`,
/// computed matrix-free: conjugate gradients on the `m x m` system followed
/// by one Toeplitz and one kernel application.
pub fn posterior_mean(
    op: &CompositeOperator,
    y: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::NonPositive("lambda"));
    }
    if y.len() != op.dim() {
        return Err(Error::Dimension {
            what: "posterior mean observation length",
            expected: op.dim(),
            got: y.len(),
        });
    }
    let x = cg_shifted(op, y, lambda, CG_TOL, cg_cap(op))?;
    let phit_x = op
        .phi()
        .apply_transpose(&DMatrix::from_column_slice(op.dim(), 1, x.as_slice()))?;
    Ok(op.kernel().apply_k(&phit_x)?.column(0).into_owned())
}

/// Fit metric: `100 (1 - ||theta_hat - theta|| / ||theta - mean(theta) 1||)`.
/// 100 is an exact match; 0 means the error is as large as the deviation of
/// the true response from its mean.
pub fn fit_metric(theta_hat: &DVector<f64>, theta_true: &DVector<f64>) -> Result<f64> {
    if theta_hat.len() != theta_true.len() {
        return Err(Error::Dimension {
            what: "fit metric lengths",
            expected: theta_true.len(),
            got: theta_hat.len(),
        });
    }
    let mean = theta_true.mean();
    let centered_norm = theta_true.map(|v| v - mean).norm();
    if centered_norm == 0.0 {
        return Err(Error::InvalidParam(
            "fit metric undefined for a constant ground-truth FIR".into(),
        ));
    }
    Ok(100.0 * (1.0 - (theta_hat - theta_true).norm() / centered_norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{KernelFactor, ToeplitzOperator};
    use crate::sample::{gaussian_vector, rng_from_seed};
    use nalgebra::DMatrix;

    fn composite(seed: u64, m: usize, n: usize, beta: f64) -> (CompositeOperator, DVector<f64>) {
        let mut rng = rng_from_seed(seed);
        let u = gaussian_vector(&mut rng, m);
        let y = gaussian_vector(&mut rng, m);
        let phi = ToeplitzOperator::new(u, n).unwrap();
        (
            CompositeOperator::new(phi, KernelFactor::tc(n, beta).unwrap()).unwrap(),
            y,
        )
    }

    #[test]
    fn zero_observation_gives_zero_estimate() {
        let (op, _) = composite(1, 30, 8, 0.7);
        let theta = posterior_mean(&op, &DVector::zeros(30), 1.0).unwrap();
        assert_eq!(theta, DVector::zeros(8));
    }

    #[test]
    fn large_lambda_norm_bound() {
        let (op, y) = composite(5, 40, 10, 0.8);
        let ym = DMatrix::from_column_slice(40, 1, y.as_slice());
        let kpty = op
            .kernel()
            .apply_k(&op.phi().apply_transpose(&ym).unwrap())
            .unwrap();
        let base = kpty.norm();
        for lambda in [1e3, 1e6] {
            let theta = posterior_mean(&op, &y, lambda).unwrap();
            assert!(
                theta.norm() <= base / lambda * (1.0 + 1e-6),
                "lambda={lambda}"
            );
        }
    }

    #[test]
    fn matches_dense_solve() {
        let (op, y) = composite(9, 60, 15, 0.85);
        let phi_d = op.phi().dense_from_rule();
        let k_d = op.kernel().dense_k_from_rule();
        let a = &phi_d * &k_d * phi_d.transpose();
        for lambda in [0.05, 1.0, 30.0] {
            let got = posterior_mean(&op, &y, lambda).unwrap();
            let shifted = &a + DMatrix::identity(60, 60) * lambda;
            let x = shifted
                .cholesky()
                .unwrap()
                .solve(&DMatrix::from_column_slice(60, 1, y.as_slice()));
            let want = &k_d * phi_d.transpose() * x.column(0).clone_owned();
            let rel = (&got - &want).norm() / want.norm();
            assert!(rel <= 1e-8, "lambda={lambda}: rel {rel:e}");
        }
    }

    #[test]
    fn linear_in_observation() {
        let (op, y1) = composite(13, 50, 12, 0.75);
        let y2 = gaussian_vector(&mut rng_from_seed(14), 50);
        let lambda = 0.5;
        let combined = posterior_mean(&op, &(&y1 * 2.0 + &y2 * -3.0), lambda).unwrap();
        let separate = posterior_mean(&op, &y1, lambda).unwrap() * 2.0
            + posterior_mean(&op, &y2, lambda).unwrap() * -3.0;
        let rel = (&combined - &separate).norm() / separate.norm();
        assert!(rel <= 1e-8, "rel {rel:e}");
    }

    #[test]
    fn fit_metric_anchors() {
        let theta = DVector::from_vec(vec![1.0, 3.0, 2.0, -1.0]);
        assert!((fit_metric(&theta, &theta).unwrap() - 100.0).abs() < 1e-12);
        let mean = DVector::from_element(4, theta.mean());
        assert!(fit_metric(&mean, &theta).unwrap().abs() < 1e-12);
    }

    #[test]
    fn fit_metric_hand_value() {
        // theta = (1, 3), theta_hat = (1, 1): 100 (1 - 2 / sqrt(2)).
        let theta = DVector::from_vec(vec![1.0, 3.0]);
        let hat = DVector::from_vec(vec![1.0, 1.0]);
        let want = 100.0 * (1.0 - 2.0 / 2.0f64.sqrt());
        let got = fit_metric(&hat, &theta).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!((got + 41.42).abs() < 0.01);
    }

    #[test]
    fn fit_metric_rejects_constant_truth() {
        let theta = DVector::from_element(5, 2.0);
        let hat = DVector::zeros(5);
        assert!(fit_metric(&hat, &theta).is_err());
    }

    #[test]
    fn sigma2_identity() {
        let est = FirEstimate::new(DVector::zeros(3), 0.25, 8.0, 0.5, None).unwrap();
        assert_eq!(est.sigma2_star, 2.0);
    }
}
