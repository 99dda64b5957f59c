use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel families for the prior covariance `K(beta) = L L'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `K[i, j] = beta^max(i, j)` (1-based indices).
    Tc,
    /// `K[i, j] = c * beta^((i + j) / 2) * rho^|i - j|`.
    Dc,
    /// `K[i, j] = beta^(i + j + max(i, j)) / 2 - beta^(3 max(i, j)) / 6`.
    Ss,
    /// Explicit lower-triangular factor, `O(n^2)` apply; testing fallback.
    DenseCustom,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelParams {
    pub beta: f64,
    pub rho: f64,
    pub c: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        // DC secondaries are fixed defaults unless configured.
        Self {
            beta: 0.9,
            rho: 0.9,
            c: 1.0,
        }
    }
}

/// The lower-triangular part of every structured kernel factor has the
/// rank-structured form
///
/// ```text
/// L[i, j] = sum_t ratio_t^(i - j) * h[j, t],   i >= j,
/// ```
///
/// which admits `O(n)` application of `L` and `L'` per column through scaled
/// prefix/suffix recurrences whose coefficients never exceed the magnitude of
/// the matrix entries themselves.
enum Repr {
    Semiseparable {
        ratios: Vec<f64>,
        /// `n x rank` coefficient table; row `j` holds `h_t(j)`.
        h: DMatrix<f64>,
    },
    Dense {
        l: DMatrix<f64>,
    },
}

/// Structured Cholesky factor `L(beta)` of a kernel matrix `K = L L'`.
pub struct KernelFactor {
    kind: KernelKind,
    n: usize,
    params: KernelParams,
    repr: Repr,
    ops: AtomicU64,
}

impl KernelFactor {
    /// TC kernel. `L[i, j] = beta^(i - j/2) sqrt(1 - beta)` for `j >= 2` and
    /// `beta^(i - 1/2)` for `j = 1` (1-based).
    pub fn tc(n: usize, beta: f64) -> Result<Self> {
        check_order(n)?;
        check_open_unit("TC beta", beta)?;
        let mut h = DMatrix::zeros(n, 1);
        let sqrt_one_minus = (1.0 - beta).sqrt();
        let mut beta_half_pow = beta.sqrt(); // beta^(j/2) at j = 1
        h[(0, 0)] = beta_half_pow;
        for j in 1..n {
            beta_half_pow *= beta.sqrt();
            h[(j, 0)] = beta_half_pow * sqrt_one_minus;
        }
        Ok(Self {
            kind: KernelKind::Tc,
            n,
            params: KernelParams {
                beta,
                ..KernelParams::default()
            },
            repr: Repr::Semiseparable {
                ratios: vec![beta],
                h,
            },
            ops: AtomicU64::new(0),
        })
    }

    /// DC kernel with decay `beta`, correlation `rho`, and scale `c`.
    pub fn dc(n: usize, beta: f64, rho: f64, c: f64) -> Result<Self> {
        check_order(n)?;
        check_open_unit("DC beta", beta)?;
        if !(rho.is_finite() && rho.abs() < 1.0) {
            return Err(Error::InvalidParam(format!(
                "DC rho = {rho} must lie in (-1, 1)"
            )));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidParam(format!("DC c = {c} must be positive")));
        }
        let mut h = DMatrix::zeros(n, 1);
        let sqrt_c = c.sqrt();
        let corr = (1.0 - rho * rho).sqrt();
        let mut beta_half_pow = beta.sqrt();
        h[(0, 0)] = sqrt_c * beta_half_pow;
        for j in 1..n {
            beta_half_pow *= beta.sqrt();
            h[(j, 0)] = sqrt_c * beta_half_pow * corr;
        }
        Ok(Self {
            kind: KernelKind::Dc,
            n,
            params: KernelParams { beta, rho, c },
            repr: Repr::Semiseparable {
                ratios: vec![beta.sqrt() * rho],
                h,
            },
            ops: AtomicU64::new(0),
        })
    }

    /// SS kernel. The lower part is a rank-2 generator matrix with generator
    /// ratios `(beta^2, beta^3)`; its Cholesky coefficients are produced by a
    /// scaled 2x2 Gram recursion whose iterates decay with the kernel entries.
    pub fn ss(n: usize, beta: f64) -> Result<Self> {
        check_order(n)?;
        check_open_unit("SS beta", beta)?;
        let ratios = vec![beta * beta, beta * beta * beta];
        let d = [beta * beta, beta * beta * beta];
        let mut h = DMatrix::zeros(n, 2);
        // p holds the scaled Gram matrix a(j) G(j) a(j)' of the generator
        // Cholesky recursion; b_hat(j) = diag(a(j)) * b(j).
        let mut p = [[0.0f64; 2]; 2];
        let mut beta_3j = beta * beta * beta; // beta^(3j) at j = 1
        for j in 0..n {
            let b_hat = [beta_3j / 2.0, -beta_3j / 6.0];
            // zeta = b_hat - D P D * 1
            let pd = [
                [d[0] * p[0][0] * d[0], d[0] * p[0][1] * d[1]],
                [d[1] * p[1][0] * d[0], d[1] * p[1][1] * d[1]],
            ];
            let zeta = [
                b_hat[0] - (pd[0][0] + pd[0][1]),
                b_hat[1] - (pd[1][0] + pd[1][1]),
            ];
            let sigma = zeta[0] + zeta[1]; // = L[j, j]^2
            if sigma > f64::MIN_POSITIVE {
                let s = sigma.sqrt();
                h[(j, 0)] = zeta[0] / s;
                h[(j, 1)] = zeta[1] / s;
                p = [
                    [pd[0][0] + h[(j, 0)] * h[(j, 0)], pd[0][1] + h[(j, 0)] * h[(j, 1)]],
                    [pd[1][0] + h[(j, 1)] * h[(j, 0)], pd[1][1] + h[(j, 1)] * h[(j, 1)]],
                ];
            } else {
                // Pivot underflowed: continue with a semidefinite factor.
                p = pd;
            }
            beta_3j *= beta * beta * beta;
        }
        Ok(Self {
            kind: KernelKind::Ss,
            n,
            params: KernelParams {
                beta,
                ..KernelParams::default()
            },
            repr: Repr::Semiseparable { ratios, h },
            ops: AtomicU64::new(0),
        })
    }

    /// Explicit lower-triangular factor for testing and exotic kernels.
    pub fn dense_custom(l: DMatrix<f64>) -> Result<Self> {
        let n = l.nrows();
        check_order(n)?;
        if l.ncols() != n {
            return Err(Error::Dimension {
                what: "DenseCustom factor columns",
                expected: n,
                got: l.ncols(),
            });
        }
        if !l.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("DenseCustom factor"));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if l[(i, j)] != 0.0 {
                    return Err(Error::InvalidParam(
                        "DenseCustom factor must be lower triangular".into(),
                    ));
                }
            }
        }
        Ok(Self {
            kind: KernelKind::DenseCustom,
            n,
            params: KernelParams::default(),
            repr: Repr::Dense { l },
            ops: AtomicU64::new(0),
        })
    }

    pub fn from_kind(kind: KernelKind, n: usize, params: KernelParams) -> Result<Self> {
        match kind {
            KernelKind::Tc => Self::tc(n, params.beta),
            KernelKind::Dc => Self::dc(n, params.beta, params.rho, params.c),
            KernelKind::Ss => Self::ss(n, params.beta),
            KernelKind::DenseCustom => Err(Error::InvalidParam(
                "DenseCustom factors are constructed from an explicit matrix".into(),
            )),
        }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    /// Cumulative count of inner recurrence steps, for verifying the `O(n)`
    /// application cost.
    pub fn ops_count(&self) -> u64 {
        self.ops.load(Ordering::Relaxed)
    }

    /// `L X`.
    pub fn apply_l(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        match &self.repr {
            Repr::Dense { l } => {
                self.ops
                    .fetch_add((self.n * self.n * x.ncols()) as u64, Ordering::Relaxed);
                Ok(l * x)
            }
            Repr::Semiseparable { ratios, h } => {
                let mut out = DMatrix::zeros(self.n, x.ncols());
                let rank = ratios.len();
                let mut running = vec![0.0f64; rank];
                for col in 0..x.ncols() {
                    running.iter_mut().for_each(|r| *r = 0.0);
                    for i in 0..self.n {
                        let xi = x[(i, col)];
                        let mut acc = 0.0;
                        for (t, r) in running.iter_mut().enumerate() {
                            *r = ratios[t] * *r + h[(i, t)] * xi;
                            acc += *r;
                        }
                        out[(i, col)] = acc;
                    }
                }
                self.ops
                    .fetch_add((self.n * rank * x.ncols()) as u64, Ordering::Relaxed);
                Ok(out)
            }
        }
    }

    /// `L' X`.
    pub fn apply_lt(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        match &self.repr {
            Repr::Dense { l } => {
                self.ops
                    .fetch_add((self.n * self.n * x.ncols()) as u64, Ordering::Relaxed);
                Ok(l.transpose() * x)
            }
            Repr::Semiseparable { ratios, h } => {
                let mut out = DMatrix::zeros(self.n, x.ncols());
                let rank = ratios.len();
                let mut suffix = vec![0.0f64; rank];
                for col in 0..x.ncols() {
                    suffix.iter_mut().for_each(|s| *s = 0.0);
                    for j in (0..self.n).rev() {
                        let xj = x[(j, col)];
                        let mut acc = 0.0;
                        for (t, s) in suffix.iter_mut().enumerate() {
                            *s = xj + ratios[t] * *s;
                            acc += h[(j, t)] * *s;
                        }
                        out[(j, col)] = acc;
                    }
                }
                self.ops
                    .fetch_add((self.n * rank * x.ncols()) as u64, Ordering::Relaxed);
                Ok(out)
            }
        }
    }

    /// `K X = L (L' X)`.
    pub fn apply_k(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.apply_l(&self.apply_lt(x)?)
    }

    /// Materialized `L`; reference/testing helper.
    pub fn dense_l(&self) -> DMatrix<f64> {
        match &self.repr {
            Repr::Dense { l } => l.clone(),
            Repr::Semiseparable { ratios, h } => {
                let mut l = DMatrix::zeros(self.n, self.n);
                for j in 0..self.n {
                    for t in 0..ratios.len() {
                        let mut pow = 1.0;
                        for i in j..self.n {
                            l[(i, j)] += pow * h[(j, t)];
                            pow *= ratios[t];
                        }
                    }
                }
                l
            }
        }
    }

    /// Dense `K` from the closed-form entry rules (1-based indices in the
    /// formulas); independent oracle for the factor representation.
    pub fn dense_k_from_rule(&self) -> DMatrix<f64> {
        let n = self.n;
        let p = self.params;
        match self.kind {
            KernelKind::Tc => DMatrix::from_fn(n, n, |i, j| {
                p.beta.powi((i.max(j) + 1) as i32)
            }),
            KernelKind::Dc => DMatrix::from_fn(n, n, |i, j| {
                let (bi, bj) = ((i + 1) as f64, (j + 1) as f64);
                p.c * p.beta.powf((bi + bj) / 2.0) * p.rho.powi((bi - bj).abs() as i32)
            }),
            KernelKind::Ss => DMatrix::from_fn(n, n, |i, j| {
                let (bi, bj) = (i + 1, j + 1);
                let mx = bi.max(bj);
                p.beta.powi((bi + bj + mx) as i32) / 2.0 - p.beta.powi(3 * mx as i32) / 6.0
            }),
            KernelKind::DenseCustom => {
                let l = self.dense_l();
                &l * l.transpose()
            }
        }
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.n {
            return Err(Error::Dimension {
                what: "kernel factor apply rows",
                expected: self.n,
                got: x.nrows(),
            });
        }
        Ok(())
    }
}

fn check_order(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidParam("kernel order n must be >= 1".into()));
    }
    Ok(())
}

fn check_open_unit(what: &str, beta: f64) -> Result<()> {
    if !(beta.is_finite() && beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParam(format!(
            "{what} = {beta} must lie in the open interval (0, 1)"
        )));
    }
    Ok(())
}
