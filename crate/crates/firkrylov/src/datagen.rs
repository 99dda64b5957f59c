//! Synthetic system generation: white Gaussian input filtered by the
//! second-order transfer function `G(z) = (1 - a z^{-1})^{-2}`, with output
//! noise scaled to a target signal-to-noise ratio.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{SystemData, ToeplitzOperator};
use crate::sample::{gaussian_vector, rng_from_seed};

/// Generation parameters. The defaults are the benchmark values `a = 0.2`,
/// `SNR = 10`, `n = 2000`, `m = 10^4`. `snr` is a linear power ratio unless
/// `snr_is_db` is set; `f64::INFINITY` requests noiseless output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub a: f64,
    pub m: usize,
    pub n: usize,
    pub snr: f64,
    pub snr_is_db: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            a: 0.2,
            m: 10_000,
            n: 2000,
            snr: 10.0,
            snr_is_db: false,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0 && self.a < 1.0) {
            return Err(Error::InvalidParam(format!(
                "pole parameter a = {} must lie in (0, 1)",
                self.a
            )));
        }
        if self.n == 0 || self.n > self.m {
            return Err(Error::InvalidParam(format!(
                "FIR order n = {} must satisfy 1 <= n <= m = {}",
                self.n, self.m
            )));
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "SNR = {} must be positive (or infinite for noiseless data)",
                self.snr
            )));
        }
        Ok(())
    }

    /// Linear power ratio, converting from decibels when requested.
    pub fn snr_linear(&self) -> f64 {
        if self.snr_is_db {
            10f64.powf(self.snr / 10.0)
        } else {
            self.snr
        }
    }

    pub fn noiseless(&self) -> bool {
        self.snr.is_infinite()
    }
}

/// Impulse-response coefficients of `G(z) = (1 - a z^{-1})^{-2}`:
/// `h_j = (j + 1) a^j`, `j = 0..n-1`.
pub fn true_fir(a: f64, n: usize) -> Result<DVector<f64>> {
    if !(a.is_finite() && a > 0.0 && a < 1.0) {
        return Err(Error::InvalidParam(format!(
            "pole parameter a = {a} must lie in (0, 1)"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidParam("FIR order must be >= 1".into()));
    }
    let mut h = DVector::zeros(n);
    let mut pow = 1.0;
    for j in 0..n {
        h[j] = (j + 1) as f64 * pow;
        pow *= a;
    }
    Ok(h)
}

/// Generates a synthetic system record: `u` iid standard Gaussian, the
/// noiseless output through the same strictly lower triangular convolution
/// the estimators assume, and noise scaled so that the empirical power ratio
/// equals the target exactly.
pub fn generate(spec: &SynthSpec) -> Result<SystemData> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let u = gaussian_vector(&mut rng, spec.m);
    let theta = true_fir(spec.a, spec.n)?;
    let phi = ToeplitzOperator::new(u.clone(), spec.n)?;
    let clean = phi
        .apply(&DMatrix::from_column_slice(spec.n, 1, theta.as_slice()))?
        .column(0)
        .into_owned();
    let y = if spec.noiseless() {
        clean
    } else {
        let noise = gaussian_vector(&mut rng, spec.m);
        let signal_power = clean.norm_squared();
        let noise_power = noise.norm_squared();
        if noise_power == 0.0 {
            return Err(Error::NonFinite("noise draw"));
        }
        let scale = (signal_power / (spec.snr_linear() * noise_power)).sqrt();
        &clean + noise * scale
    };
    SystemData::new(u, y, spec.n, Some(theta))
}
