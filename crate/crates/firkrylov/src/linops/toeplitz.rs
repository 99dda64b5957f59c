use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// The strictly lower triangular Toeplitz input matrix `Phi` in matrix-free
/// form. With 1-based indices, `Phi[i, j] = u[i - j]` for `i > j` and zero
/// otherwise, so `(Phi x)` is the one-step-delayed convolution of `u` with
/// `x`. Both `Phi` and `Phi'` are applied by zero-padded circular convolution
/// at `O((m + n) log(m + n))` per column.
pub struct ToeplitzOperator {
    u: DVector<f64>,
    m: usize,
    n: usize,
    fft_len: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    u_hat: Vec<Complex<f64>>,
    column_applies: AtomicU64,
}

impl ToeplitzOperator {
    pub fn new(u: DVector<f64>, n: usize) -> Result<Self> {
        let m = u.len();
        if n == 0 || n > m {
            return Err(Error::InvalidParam(format!(
                "Toeplitz column count n = {n} must satisfy 1 <= n <= m = {m}"
            )));
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Toeplitz input signal"));
        }
        // A power of two covering m + n keeps both the convolution reads and
        // the correlation reads (which index up to lag n) free of circular
        // wrap-around.
        let fft_len = (m + n).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(fft_len);
        let ifft = planner.plan_fft_inverse(fft_len);
        let mut u_hat = vec![Complex::new(0.0, 0.0); fft_len];
        for (i, &v) in u.iter().enumerate() {
            u_hat[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut u_hat);
        Ok(Self {
            u,
            m,
            n,
            fft_len,
            fft,
            ifft,
            u_hat,
            column_applies: AtomicU64::new(0),
        })
    }

    pub fn num_rows(&self) -> usize {
        self.m
    }

    pub fn num_cols(&self) -> usize {
        self.n
    }

    pub fn input(&self) -> &DVector<f64> {
        &self.u
    }

    /// Cumulative number of columns `Phi` or `Phi'` has been applied to.
    pub fn column_applies(&self) -> u64 {
        self.column_applies.load(Ordering::Relaxed)
    }

    /// `Phi X` for an `n x b` matrix `X`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.n {
            return Err(Error::Dimension {
                what: "Toeplitz apply rows",
                expected: self.n,
                got: x.nrows(),
            });
        }
        let mut out = DMatrix::zeros(self.m, x.ncols());
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        let scale = 1.0 / self.fft_len as f64;
        for col in 0..x.ncols() {
            self.load_column(&mut buf, x.column(col).iter().copied(), "Toeplitz apply input")?;
            self.fft.process(&mut buf);
            for (b, uh) in buf.iter_mut().zip(&self.u_hat) {
                *b *= uh;
            }
            self.ifft.process(&mut buf);
            // (Phi x)[0] = 0 and (Phi x)[r] = conv(u, x)[r - 1] for r >= 1.
            for r in 1..self.m {
                out[(r, col)] = buf[r - 1].re * scale;
            }
        }
        self.column_applies
            .fetch_add(x.ncols() as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// `Phi' Z` for an `m x b` matrix `Z`.
    pub fn apply_transpose(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.nrows() != self.m {
            return Err(Error::Dimension {
                what: "Toeplitz transpose apply rows",
                expected: self.m,
                got: z.nrows(),
            });
        }
        let mut out = DMatrix::zeros(self.n, z.ncols());
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        let scale = 1.0 / self.fft_len as f64;
        for col in 0..z.ncols() {
            self.load_column(
                &mut buf,
                z.column(col).iter().copied(),
                "Toeplitz transpose input",
            )?;
            self.fft.process(&mut buf);
            // Circular cross-correlation: conj(FFT(u)) .* FFT(z).
            for (b, uh) in buf.iter_mut().zip(&self.u_hat) {
                *b *= uh.conj();
            }
            self.ifft.process(&mut buf);
            // (Phi' z)[c] = sum_a u[a] z[a + c + 1] = corr(u, z)[c + 1].
            for c in 0..self.n {
                out[(c, col)] = buf[c + 1].re * scale;
            }
        }
        self.column_applies
            .fetch_add(z.ncols() as u64, Ordering::Relaxed);
        Ok(out)
    }

    fn load_column(
        &self,
        buf: &mut [Complex<f64>],
        col: impl Iterator<Item = f64>,
        what: &'static str,
    ) -> Result<()> {
        buf.fill(Complex::new(0.0, 0.0));
        for (slot, v) in buf.iter_mut().zip(col) {
            if !v.is_finite() {
                return Err(Error::NonFinite(what));
            }
            *slot = Complex::new(v, 0.0);
        }
        Ok(())
    }

    /// Dense `Phi` built directly from the index rule; reference
    /// implementation for tests and small-problem oracles.
    pub fn dense_from_rule(&self) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(self.m, self.n);
        for i in 0..self.m {
            for j in 0..self.n.min(i) {
                phi[(i, j)] = self.u[i - j - 1];
            }
        }
        phi
    }
}
