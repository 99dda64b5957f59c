use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lanczos::{block_lanczos, eig_sym, BlockLanczosResult, DEFAULT_TAU};
use crate::linops::LinearOp;
use crate::sample::{gaussian_matrix, rng_from_seed};

use super::residual::{residual_trace_eval, ResidualTraceModel};
use super::{pml_eval_from_spectrum, PmlEvaluation, PmlSpectrum};

/// Krylov-augmented preprocessing: samples a Gaussian block `Omega`
/// (`m x n_omega`, seeded), factorizes the augmented subspace
/// `K_k(A, [y, Omega])` by block Lanczos, eigendecomposes the compression,
/// and returns the spectrum `(theta_i, ytilde_i^2)` with zero leftover mass
/// (`y` is a starting-block column, hence inside the basis span).
///
/// The spectrum serves every lambda afterwards; by shift invariance of the
/// Krylov subspace no further operator applications are needed.
pub fn pml_krylov_precompute(
    op: &dyn LinearOp,
    y: &DVector<f64>,
    n_omega: usize,
    k: usize,
    seed: u64,
) -> Result<(PmlSpectrum, BlockLanczosResult)> {
    let m = op.dim();
    if y.len() != m {
        return Err(Error::Dimension {
            what: "Krylov evaluator observation length",
            expected: m,
            got: y.len(),
        });
    }
    let mut z = DMatrix::zeros(m, n_omega + 1);
    z.column_mut(0).copy_from(y);
    if n_omega > 0 {
        let omega = gaussian_matrix(&mut rng_from_seed(seed), m, n_omega);
        z.columns_mut(1, n_omega).copy_from(&omega);
    }
    let lanczos = block_lanczos(op, &z, k, DEFAULT_TAU)?;
    let t = lanczos.assemble_tridiagonal();
    let (thetas, v) = eig_sym(&t)?;
    let wty = lanczos.w.transpose() * y;
    let ytilde = v.transpose() * wty;
    let coeffs = ytilde.map(|c| c * c);
    let spectrum = PmlSpectrum::new(thetas, coeffs, 0.0, m, y.norm_squared())?;
    Ok((spectrum, lanczos))
}

/// Evaluates the Krylov-augmented PML approximation at `lambda`; when a
/// residual trace model is supplied, its stochastic correction is added to
/// the trace term.
pub fn pml_krylov_eval(
    spec: &PmlSpectrum,
    model: Option<&ResidualTraceModel>,
    lambda: f64,
) -> Result<PmlEvaluation> {
    let mut eval = pml_eval_from_spectrum(spec, lambda)?;
    if let Some(model) = model {
        let correction = residual_trace_eval(model, lambda)?;
        eval.trace_term += correction / spec.ambient_dim() as f64;
        eval.psi = eval.quad_term + eval.trace_term;
    }
    Ok(eval)
}
