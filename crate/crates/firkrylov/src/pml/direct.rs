use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linops::{KernelFactor, SystemData, ToeplitzOperator};

use super::PmlSpectrum;

/// Default cap on the number of samples the direct evaluator will
/// materialize `Phi L` for.
pub const DEFAULT_DIRECT_CAP: usize = 4096;

/// Direct evaluator preprocessing: materializes `Phi_tilde = Phi L`, computes
/// its economy SVD (thin QR followed by an SVD of the triangular factor), and
/// returns the spectrum `theta_i = s_i^2`, `ytilde = U' y`, and the leftover
/// mass `||y||^2 - ||ytilde||^2`. `O(m n^2)` work, `O(m n)` memory.
pub fn pml_direct_precompute(data: &SystemData, kernel: &KernelFactor) -> Result<PmlSpectrum> {
    pml_direct_precompute_with_cap(data, kernel, DEFAULT_DIRECT_CAP)
}

pub fn pml_direct_precompute_with_cap(
    data: &SystemData,
    kernel: &KernelFactor,
    cap: usize,
) -> Result<PmlSpectrum> {
    let phi = ToeplitzOperator::new(data.input().clone(), data.fir_order())?;
    pml_direct_precompute_from_ops(&phi, kernel, data.output(), cap)
}

/// Direct preprocessing against an externally constructed Toeplitz operator,
/// so callers can track its application counter across evaluators.
pub fn pml_direct_precompute_from_ops(
    phi: &ToeplitzOperator,
    kernel: &KernelFactor,
    y: &nalgebra::DVector<f64>,
    cap: usize,
) -> Result<PmlSpectrum> {
    let m = phi.num_rows();
    let n = phi.num_cols();
    if kernel.order() != n {
        return Err(Error::Dimension {
            what: "direct evaluator kernel order",
            expected: n,
            got: kernel.order(),
        });
    }
    if y.len() != m {
        return Err(Error::Dimension {
            what: "direct evaluator observation length",
            expected: m,
            got: y.len(),
        });
    }
    if m > cap {
        return Err(Error::CapExceeded {
            what: "direct evaluator sample count",
            value: m,
            cap,
        });
    }

    let l_dense = kernel.apply_l(&DMatrix::identity(n, n))?;
    let phi_tilde = phi.apply(&l_dense)?;

    // Economy SVD via thin QR: Phi_tilde = Q R, R = Ur S V', U = Q Ur.
    let qr = phi_tilde.qr();
    let mut qty = DMatrix::from_column_slice(m, 1, y.as_slice());
    qr.q_tr_mul(&mut qty);
    let r = qr.r();
    let svd = r.svd(true, false);
    let ur = svd.u.as_ref().ok_or(Error::EigFailure)?;
    // ytilde = Ur' (Q' y)[0..n].
    let head = qty.view((0, 0), (n, 1)).into_owned();
    let ytilde = ur.transpose() * head;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let s_max = svd.singular_values[order[0]];
    let y_norm_sq = y.norm_squared();

    let mut thetas = nalgebra::DVector::zeros(n);
    let mut coeffs = nalgebra::DVector::zeros(n);
    let mut captured = 0.0;
    for (dst, &src) in order.iter().enumerate() {
        let s = svd.singular_values[src];
        // Sub-roundoff singular values carry arbitrary left vectors; their
        // coefficient mass belongs to the lambda-only leftover term, which
        // evaluates identically.
        if s > f64::EPSILON * s_max {
            thetas[dst] = s * s;
            coeffs[dst] = ytilde[(src, 0)] * ytilde[(src, 0)];
            captured += coeffs[dst];
        }
    }
    let leftover = (y_norm_sq - captured).max(0.0);
    Ok(PmlSpectrum::new(thetas, coeffs, leftover, m, y_norm_sq)?
        .with_beta(kernel.params().beta))
}
