use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

use super::{KernelFactor, ToeplitzOperator};

/// Default cap on the dimension that may be materialized densely.
pub const DENSE_CAP: usize = 2000;

/// A symmetric operator accessed through block matrix-vector products.
///
/// Implementations count applications per column; `apply_mat` must be
/// re-entrant so factorizations of independent operators can run concurrently.
pub trait LinearOp: Sync {
    fn dim(&self) -> usize;

    fn apply_mat(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// Cumulative per-column application count.
    fn matvecs(&self) -> u64;
}

/// The positive semidefinite operator `A(beta) = Phi L L' Phi'`, applied as a
/// four-stage pipeline without ever forming the `m x m` matrix.
pub struct CompositeOperator {
    phi: ToeplitzOperator,
    kernel: KernelFactor,
    matvec_count: AtomicU64,
}

impl CompositeOperator {
    pub fn new(phi: ToeplitzOperator, kernel: KernelFactor) -> Result<Self> {
        if phi.num_cols() != kernel.order() {
            return Err(Error::Dimension {
                what: "composite operator inner dimension",
                expected: phi.num_cols(),
                got: kernel.order(),
            });
        }
        Ok(Self {
            phi,
            kernel,
            matvec_count: AtomicU64::new(0),
        })
    }

    pub fn phi(&self) -> &ToeplitzOperator {
        &self.phi
    }

    pub fn kernel(&self) -> &KernelFactor {
        &self.kernel
    }
}

impl LinearOp for CompositeOperator {
    fn dim(&self) -> usize {
        self.phi.num_rows()
    }

    fn apply_mat(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.dim() {
            return Err(Error::Dimension {
                what: "composite operator apply rows",
                expected: self.dim(),
                got: x.nrows(),
            });
        }
        let s1 = self.phi.apply_transpose(x)?;
        let s2 = self.kernel.apply_lt(&s1)?;
        let s3 = self.kernel.apply_l(&s2)?;
        let out = self.phi.apply(&s3)?;
        self.matvec_count
            .fetch_add(x.ncols() as u64, Ordering::Relaxed);
        Ok(out)
    }

    fn matvecs(&self) -> u64 {
        self.matvec_count.load(Ordering::Relaxed)
    }
}

/// Materializes an operator by applying it to identity columns. Guarded by a
/// cap so `O(m^2)` memory cannot be requested by accident.
pub fn dense_materialize(op: &dyn LinearOp, cap: usize) -> Result<DMatrix<f64>> {
    let m = op.dim();
    if m > cap {
        return Err(Error::CapExceeded {
            what: "dense materialization dimension",
            value: m,
            cap,
        });
    }
    op.apply_mat(&DMatrix::identity(m, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn random_composite(rng: &mut ChaCha12Rng, m: usize, n: usize, beta: f64) -> CompositeOperator {
        let u = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let phi = ToeplitzOperator::new(u, n).unwrap();
        let kernel = KernelFactor::tc(n, beta).unwrap();
        CompositeOperator::new(phi, kernel).unwrap()
    }

    #[test]
    fn zero_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        // u = 0 makes A X = 0 for any X.
        let phi = ToeplitzOperator::new(DVector::zeros(15), 5).unwrap();
        let kernel = KernelFactor::tc(5, 0.5).unwrap();
        let a = CompositeOperator::new(phi, kernel).unwrap();
        let x = DMatrix::from_fn(15, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        assert_eq!(a.apply_mat(&x).unwrap(), DMatrix::zeros(15, 2));
        // X = 0 maps to 0.
        let a2 = random_composite(&mut rng, 20, 6, 0.8);
        assert_eq!(
            a2.apply_mat(&DMatrix::zeros(20, 3)).unwrap(),
            DMatrix::zeros(20, 3)
        );
    }

    #[test]
    fn matches_dense_assembly() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let a = random_composite(&mut rng, 40, 10, 0.7);
        let phi = a.phi().dense_from_rule();
        let k = a.kernel().dense_k_from_rule();
        let dense = &phi * &k * phi.transpose();
        let x = DMatrix::from_fn(40, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fast = a.apply_mat(&x).unwrap();
        let slow = &dense * &x;
        assert!((&fast - &slow).norm() / slow.norm() < 1e-10);
    }

    #[test]
    fn matvec_count_tracks_columns_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = random_composite(&mut rng, 25, 8, 0.6);
        assert_eq!(a.matvecs(), 0);
        a.apply_mat(&DMatrix::zeros(25, 4)).unwrap();
        assert_eq!(a.matvecs(), 4);
        // Applying the parts directly leaves the operator counter alone.
        a.phi().apply(&DMatrix::zeros(8, 2)).unwrap();
        a.kernel().apply_l(&DMatrix::zeros(8, 2)).unwrap();
        assert_eq!(a.matvecs(), 4);
        a.apply_mat(&DMatrix::zeros(25, 1)).unwrap();
        assert_eq!(a.matvecs(), 5);
    }

    #[test]
    fn dense_materialize_symmetric_psd() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for trial in 0..20 {
            let m = rng.gen_range(10..=100);
            let n = rng.gen_range(1..=m.min(30));
            let beta = rng.gen_range(0.2..0.95);
            let a = random_composite(&mut rng, m, n, beta);
            let d = dense_materialize(&a, DENSE_CAP).unwrap();
            let sym_err = (&d - d.transpose()).norm();
            assert!(sym_err <= 1e-12 * d.norm().max(1.0), "trial {trial}");
            let eigs = d.symmetric_eigenvalues();
            let max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-10 * max.max(1e-300), "trial {trial}: min={min:e} max={max:e}");
        }
    }

    #[test]
    fn dense_materialize_shift_structure() {
        // u = e2: Phi places ones on the second subdiagonal, so A is the
        // kernel matrix embedded two rows/columns down.
        let mut u = DVector::zeros(6);
        u[1] = 1.0;
        let phi = ToeplitzOperator::new(u, 3).unwrap();
        let k = KernelFactor::tc(3, 0.5).unwrap();
        let k_dense = k.dense_k_from_rule();
        let a = CompositeOperator::new(phi, k).unwrap();
        let d = dense_materialize(&a, DENSE_CAP).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if (2..5).contains(&i) && (2..5).contains(&j) {
                    k_dense[(i - 2, j - 2)]
                } else {
                    0.0
                };
                assert!((d[(i, j)] - want).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn cap_guard() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = random_composite(&mut rng, 50, 10, 0.5);
        assert!(dense_materialize(&a, 49).is_err());
    }

    #[test]
    fn concurrent_applies_are_safe_and_counted() {
        use rayon::prelude::*;
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let a = random_composite(&mut rng, 40, 12, 0.8);
        let x = DMatrix::from_fn(40, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let reference = a.apply_mat(&x).unwrap();
        let results: Vec<DMatrix<f64>> = (0..32)
            .into_par_iter()
            .map(|_| a.apply_mat(&x).unwrap())
            .collect();
        for r in results {
            assert_eq!(r, reference);
        }
        assert_eq!(a.matvecs(), 33);
    }

    #[test]
    fn quadratic_form_nonnegative() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let a = random_composite(&mut rng, 60, 20, 0.9);
        for _ in 0..10 {
            let x = DMatrix::from_fn(60, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let ax = a.apply_mat(&x).unwrap();
            let q = x.column(0).dot(&ax.column(0));
            let scale = ax.norm() * x.norm();
            assert!(q >= -1e-12 * scale.max(1.0));
        }
    }
}
