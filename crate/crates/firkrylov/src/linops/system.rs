use nalgebra::DVector;

use crate::error::{Error, Result};

/// An input/output record of a single-input single-output system, together
/// with the FIR order `n` to be estimated and, for synthetic data, the
/// ground-truth impulse response.
#[derive(Debug, Clone)]
pub struct SystemData {
    u: DVector<f64>,
    y: DVector<f64>,
    n: usize,
    theta_true: Option<DVector<f64>>,
}

impl SystemData {
    pub fn new(
        u: DVector<f64>,
        y: DVector<f64>,
        n: usize,
        theta_true: Option<DVector<f64>>,
    ) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::Dimension {
                what: "SystemData input/output lengths",
                expected: u.len(),
                got: y.len(),
            });
        }
        if n == 0 || n > u.len() {
            return Err(Error::InvalidParam(format!(
                "FIR order n = {n} must satisfy 1 <= n <= m = {}",
                u.len()
            )));
        }
        if !u.iter().all(|v| v.is_finite()) || !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("SystemData signals"));
        }
        if let Some(t) = &theta_true {
            if t.len() != n {
                return Err(Error::Dimension {
                    what: "SystemData ground-truth FIR length",
                    expected: n,
                    got: t.len(),
                });
            }
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("SystemData ground-truth FIR"));
            }
        }
        Ok(Self {
            u,
            y,
            n,
            theta_true,
        })
    }

    pub fn input(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn output(&self) -> &DVector<f64> {
        &self.y
    }

    /// Number of samples `m`.
    pub fn num_samples(&self) -> usize {
        self.u.len()
    }

    /// FIR order `n`.
    pub fn fir_order(&self) -> usize {
        self.n
    }

    pub fn theta_true(&self) -> Option<&DVector<f64>> {
        self.theta_true.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_lengths() {
        let u = DVector::from_element(4, 1.0);
        let y = DVector::from_element(3, 1.0);
        assert!(SystemData::new(u, y, 2, None).is_err());
    }

    #[test]
    fn rejects_bad_order_and_nonfinite() {
        let u = DVector::from_element(4, 1.0);
        let y = DVector::from_element(4, 1.0);
        assert!(SystemData::new(u.clone(), y.clone(), 5, None).is_err());
        assert!(SystemData::new(u.clone(), y.clone(), 0, None).is_err());
        let mut bad = y.clone();
        bad[1] = f64::NAN;
        assert!(SystemData::new(u, bad, 2, None).is_err());
    }
}
