use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lanczos::{block_lanczos, eig_sym, BlockLanczosResult, DEFAULT_TAU};
use crate::linops::LinearOp;
use crate::sample::{gaussian_vector, rng_from_seed};

/// Gauss quadrature rules of one probe: nodes are Ritz values, weights are
/// squared first components of the tridiagonal eigenvectors.
#[derive(Debug, Clone)]
pub struct ProbeRule {
    pub norm_sq: f64,
    pub nodes_full: DVector<f64>,
    pub weights_full: DVector<f64>,
    pub nodes_compressed: DVector<f64>,
    pub weights_compressed: DVector<f64>,
}

/// Per-probe Gauss rules for the two log-trace quadratic forms
/// `psi' log(lambda I + A) psi` and `psi' log(lambda I + W T W') psi`,
/// reusable across every lambda.
#[derive(Debug, Clone)]
pub struct ResidualTraceModel {
    probes: Vec<ProbeRule>,
    k_quad: usize,
}

impl ResidualTraceModel {
    pub fn probes(&self) -> &[ProbeRule] {
        &self.probes
    }

    pub fn k_quad(&self) -> usize {
        self.k_quad
    }
}

/// The compressed operator `W T W'` applied as three dense products.
struct CompressedOp<'a> {
    w: &'a DMatrix<f64>,
    t: DMatrix<f64>,
    count: AtomicU64,
}

impl LinearOp for CompressedOp<'_> {
    fn dim(&self) -> usize {
        self.w.nrows()
    }

    fn apply_mat(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.dim() {
            return Err(Error::Dimension {
                what: "compressed operator apply rows",
                expected: self.dim(),
                got: x.nrows(),
            });
        }
        self.count.fetch_add(x.ncols() as u64, Ordering::Relaxed);
        Ok(self.w * (&self.t * (self.w.transpose() * x)))
    }

    fn matvecs(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

/// Builds the Gauss rule of `psi' f(Op) psi` by single-vector Lanczos of
/// depth `k_quad` with full reorthogonalization.
fn slq_rule(op: &dyn LinearOp, psi: &DVector<f64>, k_quad: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    let z = DMatrix::from_column_slice(psi.len(), 1, psi.as_slice());
    let lanczos = block_lanczos(op, &z, k_quad, DEFAULT_TAU)?;
    let t = lanczos.assemble_tridiagonal();
    let (mut nodes, vecs) = eig_sym(&t)?;
    // Ritz values of a PSD operator; round tiny negative roundoff to zero.
    let top = nodes.iter().cloned().fold(0.0f64, f64::max);
    for v in nodes.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-8 * top.max(f64::MIN_POSITIVE) {
                return Err(Error::Indefinite("stochastic quadrature nodes"));
            }
            *v = 0.0;
        }
    }
    let weights = DVector::from_fn(nodes.len(), |j, _| {
        let c = vecs[(0, j)];
        c * c
    });
    Ok((nodes, weights))
}

/// Draws `n_psi` Gaussian probes and precomputes, for each, the two Gauss
/// rules needed by the residual trace estimator: one from Lanczos on `A`, one
/// from Lanczos on the compressed operator `W T W'` started at the same
/// probe. Approximating both quadratic forms with the same scheme, the same
/// starting vectors, and the same depth makes the discretization errors
/// cancel in the difference.
pub fn residual_trace_precompute(
    op: &dyn LinearOp,
    lanczos_result: &BlockLanczosResult,
    n_psi: usize,
    k_quad: usize,
    seed: u64,
) -> Result<ResidualTraceModel> {
    if n_psi == 0 {
        return Err(Error::InvalidParam(
            "residual trace estimation needs n_psi >= 1".into(),
        ));
    }
    if k_quad == 0 {
        return Err(Error::InvalidParam("k_quad must be >= 1".into()));
    }
    let m = op.dim();
    if lanczos_result.w.nrows() != m {
        return Err(Error::Dimension {
            what: "residual trace basis rows",
            expected: m,
            got: lanczos_result.w.nrows(),
        });
    }
    let compressed = CompressedOp {
        w: &lanczos_result.w,
        t: lanczos_result.assemble_tridiagonal(),
        count: AtomicU64::new(0),
    };
    let mut rng = rng_from_seed(seed);
    let mut probes = Vec::with_capacity(n_psi);
    for _ in 0..n_psi {
        let psi = gaussian_vector(&mut rng, m);
        let norm_sq = psi.norm_squared();
        let (nodes_full, weights_full) = slq_rule(op, &psi, k_quad)?;
        let (nodes_compressed, weights_compressed) = slq_rule(&compressed, &psi, k_quad)?;
        probes.push(ProbeRule {
            norm_sq,
            nodes_full,
            weights_full,
            nodes_compressed,
            weights_compressed,
        });
    }
    Ok(ResidualTraceModel { probes, k_quad })
}

/// Evaluates the residual trace correction
///
/// ```text
/// (1/n_psi) sum_i ||psi_i||^2 [ sum_j w_j^A log(lambda + theta_j^A)
///                             - sum_j w_j^C log(lambda + theta_j^C) ]
/// ```
///
/// at `O(n_psi k_quad)` cost with zero operator applications.
pub fn residual_trace_eval(model: &ResidualTraceModel, lambda: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::NonPositive("lambda"));
    }
    let mut total = 0.0;
    for probe in &model.probes {
        let full: f64 = probe
            .nodes_full
            .iter()
            .zip(probe.weights_full.iter())
            .map(|(&t, &w)| w * (lambda + t).ln())
            .sum();
        let compressed: f64 = probe
            .nodes_compressed
            .iter()
            .zip(probe.weights_compressed.iter())
            .map(|(&t, &w)| w * (lambda + t).ln())
            .sum();
        total += probe.norm_sq * (full - compressed);
    }
    Ok(total / model.probes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{CompositeOperator, KernelFactor, ToeplitzOperator};
    use crate::pml::pml_krylov_precompute;
    use crate::sample::gaussian_vector;
    use crate::verify::dense_trace_log;

    fn composite(seed: u64, m: usize, n: usize, beta: f64) -> (CompositeOperator, DVector<f64>) {
        let mut rng = rng_from_seed(seed);
        let u = gaussian_vector(&mut rng, m);
        let y = gaussian_vector(&mut rng, m);
        let phi = ToeplitzOperator::new(u, n).unwrap();
        let op = CompositeOperator::new(phi, KernelFactor::tc(n, beta).unwrap()).unwrap();
        (op, y)
    }

    fn dense_of(op: &CompositeOperator) -> DMatrix<f64> {
        let phi = op.phi().dense_from_rule();
        &phi * op.kernel().dense_k_from_rule() * phi.transpose()
    }

    #[test]
    fn saturated_subspace_gives_zero_correction() {
        // Rank-6 operator fully captured: both rules agree, correction ~ 0.
        let (op, y) = composite(8, 40, 6, 0.8);
        let (_, lanczos) = pml_krylov_precompute(&op, &y, 1, 5, 3).unwrap();
        let model = residual_trace_precompute(&op, &lanczos, 3, 20, 17).unwrap();
        for probe in model.probes() {
            // Discard zero-weight padding before comparing rules node by node.
            let sig_full: Vec<f64> = probe
                .nodes_full
                .iter()
                .zip(probe.weights_full.iter())
                .filter(|(_, &w)| w > 1e-16)
                .map(|(&t, _)| t)
                .collect();
            let sig_comp: Vec<f64> = probe
                .nodes_compressed
                .iter()
                .zip(probe.weights_compressed.iter())
                .filter(|(_, &w)| w > 1e-16)
                .map(|(&t, _)| t)
                .collect();
            assert_eq!(sig_full.len(), sig_comp.len());
            for (a, b) in sig_full.iter().zip(&sig_comp) {
                assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
        for lambda in [0.1, 1.0, 100.0] {
            let c = residual_trace_eval(&model, lambda).unwrap();
            assert!(c.abs() <= 1e-7 * 40.0, "lambda={lambda}: {c:e}");
        }
    }

    #[test]
    fn matches_dense_probe_average() {
        // correction(lambda) ~ (1/3) sum psi_i' R(lambda) psi_i computed densely.
        let (op, y) = composite(21, 60, 20, 0.9);
        let (_, lanczos) = pml_krylov_precompute(&op, &y, 1, 3, 7).unwrap();
        let seed = 99;
        let model = residual_trace_precompute(&op, &lanczos, 3, 30, seed).unwrap();
        let a = dense_of(&op);
        let t = lanczos.assemble_tridiagonal();
        let compressed = &lanczos.w * &t * lanczos.w.transpose();
        // Redraw the same probes.
        let mut rng = rng_from_seed(seed);
        let probes: Vec<DVector<f64>> = (0..3).map(|_| gaussian_vector(&mut rng, 60)).collect();
        for lambda in [0.5, 1.0, 5.0] {
            let got = residual_trace_eval(&model, lambda).unwrap();
            let mut want = 0.0;
            for psi in &probes {
                let qf_full = quad_form_log(&a, psi, lambda);
                let qf_comp = quad_form_log(&compressed, psi, lambda);
                want += qf_full - qf_comp;
            }
            want /= 3.0;
            let rel = (got - want).abs() / want.abs().max(1e-3);
            assert!(rel <= 1e-6, "lambda={lambda}: got {got}, want {want}, rel {rel:e}");
        }
    }

    fn quad_form_log(a: &DMatrix<f64>, psi: &DVector<f64>, lambda: f64) -> f64 {
        let (vals, vecs) = eig_sym(a).unwrap();
        let coeffs = vecs.transpose() * psi;
        coeffs
            .iter()
            .zip(vals.iter())
            .map(|(&c, &v)| c * c * (lambda + v.max(0.0)).ln())
            .sum()
    }

    #[test]
    fn weights_sum_to_one() {
        let (op, y) = composite(5, 50, 15, 0.85);
        let (_, lanczos) = pml_krylov_precompute(&op, &y, 1, 4, 2).unwrap();
        let model = residual_trace_precompute(&op, &lanczos, 4, 25, 31).unwrap();
        for probe in model.probes() {
            let sf: f64 = probe.weights_full.iter().sum();
            let sc: f64 = probe.weights_compressed.iter().sum();
            assert!((sf - 1.0).abs() <= 1e-10);
            assert!((sc - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn correction_vanishes_for_large_lambda() {
        let (op, y) = composite(13, 60, 18, 0.9);
        let (_, lanczos) = pml_krylov_precompute(&op, &y, 1, 3, 5).unwrap();
        let model = residual_trace_precompute(&op, &lanczos, 3, 25, 41).unwrap();
        let c = residual_trace_eval(&model, 1e12).unwrap();
        assert!(c.abs() <= 1e-6 * 60.0, "{c:e}");
    }

    #[test]
    fn correction_reduces_median_trace_error() {
        let mut improved = 0;
        let mut total = 0;
        for seed in 0..20u64 {
            let (op, y) = composite(100 + seed, 60, 20, 0.9);
            let (spec, lanczos) = pml_krylov_precompute(&op, &y, 1, 3, seed).unwrap();
            let model = residual_trace_precompute(&op, &lanczos, 3, 25, 1000 + seed).unwrap();
            let a = dense_of(&op);
            let lambda = 1.0;
            let truth = dense_trace_log(&a, lambda).unwrap();
            let t = lanczos.assemble_tridiagonal();
            let (thetas, _) = eig_sym(&t).unwrap();
            let r = thetas.len();
            let plain: f64 = (60 - r) as f64 * lambda.ln()
                + thetas.iter().map(|&v| (lambda + v.max(0.0)).ln()).sum::<f64>();
            let corrected = plain + residual_trace_eval(&model, lambda).unwrap();
            let _ = spec;
            if (corrected - truth).abs() <= (plain - truth).abs() {
                improved += 1;
            }
            total += 1;
        }
        // Median improvement: at least half of the seeds get better.
        assert!(improved * 2 >= total, "improved {improved}/{total}");
    }

    #[test]
    fn identical_rules_give_exact_zero() {
        let nodes = DVector::from_vec(vec![5.0, 2.0, 0.5]);
        let weights = DVector::from_vec(vec![0.5, 0.3, 0.2]);
        let model = ResidualTraceModel {
            probes: vec![ProbeRule {
                norm_sq: 3.0,
                nodes_full: nodes.clone(),
                weights_full: weights.clone(),
                nodes_compressed: nodes,
                weights_compressed: weights,
            }],
            k_quad: 3,
        };
        for lambda in [0.1, 1.0, 100.0] {
            assert_eq!(residual_trace_eval(&model, lambda).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let (op, y) = composite(1, 30, 8, 0.7);
        let (_, lanczos) = pml_krylov_precompute(&op, &y, 1, 3, 2).unwrap();
        assert!(residual_trace_precompute(&op, &lanczos, 0, 10, 3).is_err());
        assert!(residual_trace_precompute(&op, &lanczos, 2, 0, 3).is_err());
        let model = residual_trace_precompute(&op, &lanczos, 2, 10, 3).unwrap();
        assert!(residual_trace_eval(&model, 0.0).is_err());
    }
}
