//! Block Lanczos factorization with full reorthogonalization and adaptive
//! block-size deflation.
//!
//! [`block_lanczos`] produces an orthonormal basis `W` of the block Krylov
//! subspace `K_k(A, Z) = span{Z, A Z, ..., A^(k-1) Z}` together with the
//! blocks of the compression `T = W' A W`. Rank-deficient panels are handled
//! by a pivoted QR: columns whose `R` diagonal falls below `tau` relative to
//! the largest diagonal of the current panel are discarded, so the retained
//! block widths are non-increasing. A panel that is entirely at noise level
//! (relative to the largest panel scale seen during the run) terminates the
//! iteration with `breakdown` set; the partial factorization is exact in that
//! case.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linops::LinearOp;

/// Default deflation tolerance, relative to the largest `R` diagonal of the
/// current panel.
pub const DEFAULT_TAU: f64 = 1e-10;

/// Basis/compression pair produced by [`block_lanczos`].
#[derive(Debug, Clone)]
pub struct BlockLanczosResult {
    /// Orthonormal basis, `m x r` with `r` the sum of retained block widths.
    pub w: DMatrix<f64>,
    /// Symmetric diagonal blocks `M_i` (`w_i x w_i`).
    pub blocks_m: Vec<DMatrix<f64>>,
    /// Subdiagonal blocks `N_(i+1)` (`w_(i+1) x w_i`), possibly rectangular
    /// after deflation.
    pub blocks_n: Vec<DMatrix<f64>>,
    /// Retained width per iteration.
    pub block_widths: Vec<usize>,
    /// Set when the basis stopped growing before `k` iterations.
    pub breakdown: bool,
}

impl BlockLanczosResult {
    /// Total number of basis vectors `r`.
    pub fn basis_size(&self) -> usize {
        self.w.ncols()
    }

    /// Number of completed iterations (blocks in the basis).
    pub fn iterations(&self) -> usize {
        self.block_widths.len()
    }

    /// Cumulative basis size after each iteration.
    pub fn cumulative_widths(&self) -> Vec<usize> {
        let mut acc = 0;
        self.block_widths
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect()
    }

    /// Leading `r_k x r_k` compression and `m x r_k` basis corresponding to
    /// the first `k` iterations; the factorization is nested, so this equals
    /// the result of running only `k` iterations.
    pub fn truncated(&self, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        assert!(k >= 1 && k <= self.iterations(), "invalid truncation depth");
        let r_k = self.cumulative_widths()[k - 1];
        let t = self.assemble_tridiagonal();
        (
            self.w.columns(0, r_k).into_owned(),
            t.view((0, 0), (r_k, r_k)).into_owned(),
        )
    }

    /// Dense symmetric block tridiagonal `T` with `M_i` on the diagonal and
    /// `N_(i+1)` / `N_(i+1)'` on the off-diagonals.
    pub fn assemble_tridiagonal(&self) -> DMatrix<f64> {
        let r = self.basis_size();
        let mut t = DMatrix::zeros(r, r);
        let offsets = {
            let mut acc = 0;
            let mut offs = Vec::with_capacity(self.block_widths.len());
            for w in &self.block_widths {
                offs.push(acc);
                acc += w;
            }
            offs
        };
        for (i, m_i) in self.blocks_m.iter().enumerate() {
            let o = offsets[i];
            t.view_mut((o, o), m_i.shape()).copy_from(m_i);
        }
        for (i, n_i) in self.blocks_n.iter().enumerate() {
            // n_i couples block i+1 (rows) with block i (columns).
            let (ro, co) = (offsets[i + 1], offsets[i]);
            t.view_mut((ro, co), n_i.shape()).copy_from(n_i);
            t.view_mut((co, ro), (n_i.ncols(), n_i.nrows()))
                .copy_from(&n_i.transpose());
        }
        t
    }
}

/// Runs `k` iterations of the block Lanczos method on `A` with starting block
/// `Z`, deflating with tolerance `tau`.
///
/// The first panel is orthonormalized by an unpivoted QR, so when `Z`'s first
/// column is nonzero the first basis vector is proportional to it. Every
/// subsequent panel is fully reorthogonalized against all previous blocks
/// (twice) and then split by a column-pivoted QR.
pub fn block_lanczos(
    op: &dyn LinearOp,
    z: &DMatrix<f64>,
    k: usize,
    tau: f64,
) -> Result<BlockLanczosResult> {
    let m = op.dim();
    if z.nrows() != m {
        return Err(Error::Dimension {
            what: "block Lanczos starting block rows",
            expected: m,
            got: z.nrows(),
        });
    }
    if z.ncols() == 0 || z.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroStart);
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("block Lanczos starting block"));
    }
    if k == 0 {
        return Err(Error::InvalidParam("block Lanczos needs k >= 1".into()));
    }
    if !(tau.is_finite() && tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParam(format!(
            "deflation tolerance tau = {tau} must lie in (0, 1)"
        )));
    }

    // Initial panel: unpivoted QR keeps the column order of Z; drop trailing
    // columns whose R diagonal is negligible so a rank-deficient start cannot
    // poison the basis.
    let qr = z.clone().qr();
    let q0 = qr.q();
    let r0 = qr.r();
    let diag_max = (0..r0.nrows().min(r0.ncols()))
        .map(|j| r0[(j, j)].abs())
        .fold(0.0f64, f64::max);
    if diag_max == 0.0 {
        return Err(Error::ZeroStart);
    }
    let b0 = (0..q0.ncols().min(r0.ncols()))
        .take_while(|&j| r0[(j, j)].abs() >= tau * diag_max)
        .count()
        .max(1);
    let mut panels: Vec<DMatrix<f64>> = vec![q0.columns(0, b0).into_owned()];
    let mut blocks_m: Vec<DMatrix<f64>> = Vec::with_capacity(k);
    let mut blocks_n: Vec<DMatrix<f64>> = Vec::new();
    let mut block_widths: Vec<usize> = Vec::with_capacity(k);
    let mut breakdown = false;
    // Largest panel scale observed so far; panels below tau times this are
    // pure noise and terminate the run.
    let mut run_scale = diag_max;

    for i in 0..k {
        let w_i = panels.last().unwrap().clone();
        let b_i = w_i.ncols();
        block_widths.push(b_i);

        let mut y = op.apply_mat(&w_i)?;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::LanczosBreakdown { iteration: i + 1 });
        }
        for j in 0..b_i {
            run_scale = run_scale.max(y.column(j).norm());
        }
        if i > 0 {
            let n_i = blocks_n.last().unwrap();
            y -= &panels[i - 1] * n_i.transpose();
        }
        let m_i = w_i.transpose() * &y;
        let m_i = (&m_i + m_i.transpose()) * 0.5;
        y -= &w_i * &m_i;
        // Full reorthogonalization against all previous blocks, then a second
        // pass over every block including the current one.
        for p in panels.iter().take(i) {
            y -= p * (p.transpose() * &y);
        }
        for p in panels.iter() {
            y -= p * (p.transpose() * &y);
        }
        blocks_m.push(m_i);

        if i + 1 == k {
            break;
        }

        // Pivoted QR split of the panel.
        let cpqr = y.clone().col_piv_qr();
        let (q, r, perm) = cpqr.unpack();
        let diag_len = r.nrows().min(r.ncols());
        let panel_max = (0..diag_len).map(|j| r[(j, j)].abs()).fold(0.0f64, f64::max);
        if panel_max < tau * run_scale {
            breakdown = true;
            break;
        }
        let kept = (0..diag_len)
            .take_while(|&j| r[(j, j)].abs() >= tau * panel_max)
            .count();
        if kept == 0 {
            breakdown = true;
            break;
        }
        // N_(i+1) = [R_11 R_12] P' : rows 0..kept of R with the permutation
        // undone on the columns.
        let mut r_full = DMatrix::zeros(r.nrows(), b_i);
        r_full.view_mut((0, 0), r.shape()).copy_from(&r);
        perm.inv_permute_columns(&mut r_full);
        let n_next = r_full.rows(0, kept).into_owned();
        panels.push(q.columns(0, kept).into_owned());
        blocks_n.push(n_next);
    }

    let r_total: usize = block_widths.iter().sum();
    let mut w = DMatrix::zeros(m, r_total);
    let mut off = 0;
    for (p, width) in panels.iter().zip(&block_widths) {
        w.columns_mut(off, *width).copy_from(&p.columns(0, *width));
        off += width;
    }
    Ok(BlockLanczosResult {
        w,
        blocks_m,
        blocks_n,
        block_widths,
        breakdown,
    })
}

/// Spectral decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. The input is symmetrized as `(T + T') / 2` first.
pub fn eig_sym(t: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if t.nrows() != t.ncols() {
        return Err(Error::Dimension {
            what: "eig_sym input",
            expected: t.nrows(),
            got: t.ncols(),
        });
    }
    if t.is_empty() {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    if !t.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("eig_sym input"));
    }
    let sym = (t + t.transpose()) * 0.5;
    let se = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 0).ok_or(Error::EigFailure)?;
    let n = se.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].partial_cmp(&se.eigenvalues[a]).unwrap());
    let values = DVector::from_fn(n, |i, _| se.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).copy_from(&se.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{CompositeOperator, KernelFactor, ToeplitzOperator};
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    /// Dense symmetric test operator.
    pub struct DenseOp {
        mat: DMatrix<f64>,
        count: std::sync::atomic::AtomicU64,
    }

    impl DenseOp {
        pub fn new(mat: DMatrix<f64>) -> Self {
            Self {
                mat,
                count: std::sync::atomic::AtomicU64::new(0),
            }
        }
    }

    impl LinearOp for DenseOp {
        fn dim(&self) -> usize {
            self.mat.nrows()
        }
        fn apply_mat(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
            self.count
                .fetch_add(x.ncols() as u64, std::sync::atomic::Ordering::Relaxed);
            Ok(&self.mat * x)
        }
        fn matvecs(&self) -> u64 {
            self.count.load(std::sync::atomic::Ordering::Relaxed)
        }
    }

    fn gaussian_matrix(rng: &mut ChaCha12Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn random_composite(
        rng: &mut ChaCha12Rng,
        m: usize,
        n: usize,
        beta: f64,
    ) -> CompositeOperator {
        let u = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let phi = ToeplitzOperator::new(u, n).unwrap();
        CompositeOperator::new(phi, KernelFactor::tc(n, beta).unwrap()).unwrap()
    }

    fn principal_angle_sin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        // Largest sine of the principal angles between span(a) and span(b),
        // both assumed orthonormal: sqrt(1 - sigma_min(a' b)^2).
        let s = (a.transpose() * b).svd(false, false);
        let smin = s
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            .min(1.0);
        (1.0 - smin * smin).sqrt()
    }

    #[test]
    fn scaled_identity_deflates_to_rank_one() {
        let alpha = 3.5;
        let op = DenseOp::new(DMatrix::identity(10, 10) * alpha);
        let z = DMatrix::from_fn(10, 1, |i, _| (i + 1) as f64);
        let res = block_lanczos(&op, &z, 4, DEFAULT_TAU).unwrap();
        assert!(res.breakdown);
        assert_eq!(res.basis_size(), 1);
        let t = res.assemble_tridiagonal();
        assert!((t[(0, 0)] - alpha).abs() < 1e-12);
    }

    #[test]
    fn captures_full_spectrum_of_diagonal() {
        let op = DenseOp::new(DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0, 2.0, 3.0,
        ])));
        let z = DMatrix::from_element(3, 1, 1.0 / 3.0f64.sqrt());
        let res = block_lanczos(&op, &z, 3, 1e-14).unwrap();
        let t = res.assemble_tridiagonal();
        let (vals, _) = eig_sym(&t).unwrap();
        assert_eq!(vals.len(), 3);
        for (got, want) in vals.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn invariants_on_composite_operator() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let op = random_composite(&mut rng, 60, 20, 0.85);
        let y = gaussian_matrix(&mut rng, 60, 1);
        let omega = gaussian_matrix(&mut rng, 60, 1);
        let mut z = DMatrix::zeros(60, 2);
        z.column_mut(0).copy_from(&y.column(0));
        z.column_mut(1).copy_from(&omega.column(0));
        let res = block_lanczos(&op, &z, 5, DEFAULT_TAU).unwrap();
        let r = res.basis_size();
        let ortho = (res.w.transpose() * &res.w - DMatrix::identity(r, r)).norm();
        assert!(ortho <= 1e-10 * (r as f64).sqrt(), "orthonormality {ortho:e}");
        let t = res.assemble_tridiagonal();
        let aw = op.apply_mat(&res.w).unwrap();
        let compression_err = (res.w.transpose() * aw - &t).norm();
        assert!(
            compression_err <= 1e-8 * t.norm().max(1e-300),
            "compression {compression_err:e}"
        );
        // Widths never grow.
        for pair in res.block_widths.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn shift_invariance_of_subspace() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for &m in &[40usize, 100] {
            let base = {
                let g = gaussian_matrix(&mut rng, m, m);
                &g * g.transpose() / m as f64
            };
            let z = gaussian_matrix(&mut rng, m, 2);
            let op_a = DenseOp::new(base.clone());
            let op_shifted = DenseOp::new(&base + DMatrix::identity(m, m) * 2.5);
            let res_a = block_lanczos(&op_a, &z, 5, DEFAULT_TAU).unwrap();
            let res_s = block_lanczos(&op_shifted, &z, 5, DEFAULT_TAU).unwrap();
            assert_eq!(res_a.basis_size(), res_s.basis_size());
            let angle = principal_angle_sin(&res_a.w, &res_s.w);
            assert!(angle <= 1e-6, "m = {m}: angle {angle:e}");
        }
    }

    #[test]
    fn nestedness_in_iteration_count() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let op = random_composite(&mut rng, 50, 15, 0.8);
        let z = gaussian_matrix(&mut rng, 50, 2);
        let res = block_lanczos(&op, &z, 5, DEFAULT_TAU).unwrap();
        for k in 1..res.iterations() {
            let (w_small, _) = res.truncated(k);
            let (w_big, _) = res.truncated(k + 1);
            // Projection residual of the smaller basis onto the larger span.
            let proj = &w_big * (w_big.transpose() * &w_small);
            let resid = (&w_small - proj).norm();
            assert!(resid <= 1e-8, "k = {k}: residual {resid:e}");
        }
    }

    #[test]
    fn augmentation_contains_plain_krylov_space() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let op = random_composite(&mut rng, 60, 25, 0.9);
        let y = gaussian_matrix(&mut rng, 60, 1);
        let omega = gaussian_matrix(&mut rng, 60, 2);
        let mut z = DMatrix::zeros(60, 3);
        z.column_mut(0).copy_from(&y.column(0));
        z.columns_mut(1, 2).copy_from(&omega);
        let k = 4;
        let plain = block_lanczos(&op, &y, k, DEFAULT_TAU).unwrap();
        let aug = block_lanczos(&op, &z, k, DEFAULT_TAU).unwrap();
        let proj = &aug.w * (aug.w.transpose() * &plain.w);
        let resid = (&plain.w - proj).norm();
        assert!(resid <= 1e-8, "containment residual {resid:e}");
    }

    #[test]
    fn exact_capture_of_low_rank_operator() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        // rank(A) = rho; k * b >= rho + b guarantees saturation.
        for &(m, rho, b, k) in &[(40usize, 6usize, 2usize, 4usize), (100, 10, 3, 5)] {
            let g = gaussian_matrix(&mut rng, m, rho);
            let a = &g * g.transpose();
            let dense_eigs: Vec<f64> = {
                let mut e: Vec<f64> = a.symmetric_eigenvalues().iter().cloned().collect();
                e.sort_by(|x, y| y.partial_cmp(x).unwrap());
                e.truncate(rho);
                e
            };
            let op = DenseOp::new(a);
            let z = gaussian_matrix(&mut rng, m, b);
            let res = block_lanczos(&op, &z, k, DEFAULT_TAU).unwrap();
            let t = res.assemble_tridiagonal();
            let (vals, _) = eig_sym(&t).unwrap();
            for (i, want) in dense_eigs.iter().enumerate() {
                let got = vals[i];
                assert!(
                    (got - want).abs() <= 1e-8 * want.abs(),
                    "m={m} rho={rho}: eig {i}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn assemble_structure() {
        // Single block: T = M_1.
        let m1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let res = BlockLanczosResult {
            w: DMatrix::identity(4, 2),
            blocks_m: vec![m1.clone()],
            blocks_n: vec![],
            block_widths: vec![2],
            breakdown: false,
        };
        assert_eq!(res.assemble_tridiagonal(), m1);

        // Two iterations, widths (2, 2): N_2 sits in block position (2, 1).
        let m2 = DMatrix::from_row_slice(2, 2, &[3.0, 0.1, 0.1, 4.0]);
        let n2 = DMatrix::from_row_slice(2, 2, &[7.0, 8.0, 0.0, 9.0]);
        let res2 = BlockLanczosResult {
            w: DMatrix::identity(6, 4),
            blocks_m: vec![m1.clone(), m2.clone()],
            blocks_n: vec![n2.clone()],
            block_widths: vec![2, 2],
            breakdown: false,
        };
        let t = res2.assemble_tridiagonal();
        assert_eq!(t.view((0, 0), (2, 2)).clone_owned(), m1);
        assert_eq!(t.view((2, 2), (2, 2)).clone_owned(), m2);
        assert_eq!(t.view((2, 0), (2, 2)).clone_owned(), n2);
        assert_eq!(t.view((0, 2), (2, 2)).clone_owned(), n2.transpose());
    }

    #[test]
    fn assemble_matches_compression_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let g = gaussian_matrix(&mut rng, 50, 50);
        let a = &g * g.transpose() / 50.0;
        let op = DenseOp::new(a.clone());
        let z = gaussian_matrix(&mut rng, 50, 3);
        let res = block_lanczos(&op, &z, 4, DEFAULT_TAU).unwrap();
        let t = res.assemble_tridiagonal();
        let want = res.w.transpose() * &a * &res.w;
        assert!((&t - &want).norm() <= 1e-8 * t.norm());
    }

    #[test]
    fn rejects_bad_inputs() {
        let op = DenseOp::new(DMatrix::identity(5, 5));
        assert!(block_lanczos(&op, &DMatrix::zeros(5, 1), 3, DEFAULT_TAU).is_err());
        assert!(block_lanczos(&op, &DMatrix::zeros(4, 1), 3, DEFAULT_TAU).is_err());
        let z = DMatrix::from_element(5, 1, 1.0);
        assert!(block_lanczos(&op, &z, 0, DEFAULT_TAU).is_err());
        assert!(block_lanczos(&op, &z, 3, 0.0).is_err());
    }

    #[test]
    fn nonfinite_arithmetic_reports_iteration() {
        let mut mat = DMatrix::identity(5, 5);
        mat[(2, 2)] = f64::NAN;
        let op = DenseOp::new(mat);
        let z = DMatrix::from_element(5, 1, 1.0);
        match block_lanczos(&op, &z, 3, DEFAULT_TAU) {
            Err(crate::error::Error::LanczosBreakdown { iteration }) => assert_eq!(iteration, 1),
            other => panic!("expected breakdown error, got {other:?}"),
        }
    }

    #[test]
    fn eig_sym_cases() {
        let (vals, vecs) = eig_sym(&DMatrix::identity(4, 4)).unwrap();
        assert!(vals.iter().all(|&v| (v - 1.0).abs() < 1e-14));
        assert!((vecs.transpose() * &vecs - DMatrix::identity(4, 4)).norm() < 1e-12);

        let t = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let (vals, vecs) = eig_sym(&t).unwrap();
        assert_eq!(
            vals.iter().cloned().collect::<Vec<_>>(),
            vec![3.0, 2.0, 1.0]
        );
        // Permutation eigenvectors: T vecs = vecs diag(vals).
        let resid = (&t * &vecs - &vecs * DMatrix::from_diagonal(&vals)).norm();
        assert!(resid < 1e-12);

        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let g = gaussian_matrix(&mut rng, 20, 20);
        let sym = (&g + g.transpose()) * 0.5;
        let (vals, vecs) = eig_sym(&sym).unwrap();
        let recon = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((recon - &sym).norm() <= 1e-10 * sym.norm());
    }
}
