use serde::{Deserialize, Serialize};

use super::CostModelError;
use crate::Scalar;

/// `latency(b) = slope * b + intercept`, in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineLatencyModel<T> {
    pub slope: T,
    pub intercept: T,
}

impl<T: Scalar> AffineLatencyModel<T> {
    pub fn new(slope: T, intercept: T) -> Result<Self, CostModelError> {
        let m = Self { slope, intercept };
        m.validate("affine")?;
        Ok(m)
    }

    pub fn zero() -> Self {
        Self {
            slope: T::zero(),
            intercept: T::zero(),
        }
    }

    pub fn eval(&self, b: T) -> T {
        self.slope * b + self.intercept
    }

    pub fn eval_batch(&self, b: usize) -> T {
        self.eval(T::from_count(b))
    }

    pub fn scaled(&self, k: T) -> Self {
        Self {
            slope: self.slope * k,
            intercept: self.intercept * k,
        }
    }

    pub(crate) fn validate(&self, key: &str) -> Result<(), CostModelError> {
        let ok = |x: T| x.is_finite() && x >= T::zero();
        if ok(self.slope) && ok(self.intercept) {
            Ok(())
        } else {
            Err(CostModelError::InvalidModel {
                key: key.to_string(),
                reason: format!(
                    "slope {} and intercept {} must be finite and non-negative",
                    self.slope, self.intercept
                ),
            })
        }
    }
}

/// One profiled latency observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample<T> {
    pub b: usize,
    pub latency_ms: T,
    /// Which model the sample belongs to, e.g. `draft/0.5B/1`.
    #[serde(default)]
    pub key: String,
}

/// Result of [`fit_affine`].
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFit<T> {
    pub model: AffineLatencyModel<T>,
    /// Set when the unconstrained fit had a negative parameter that was pinned at zero.
    pub clamped: bool,
    /// Root-mean-square residual of the returned model over the samples.
    pub residual_rms: T,
}

/// Ordinary least squares of latency on batch size.
///
/// When the unconstrained solution has a negative slope or intercept, that
/// parameter is fixed at zero and the other one is re-fitted.
pub fn fit_affine<T: Scalar>(samples: &[ProfileSample<T>]) -> Result<AffineFit<T>, CostModelError> {
    for s in samples {
        if s.b == 0 || !(s.latency_ms > T::zero() && s.latency_ms.is_finite()) {
            return Err(CostModelError::InvalidSample {
                b: s.b,
                latency_ms: s.latency_ms.as_f64(),
            });
        }
    }
    let mut distinct: Vec<usize> = samples.iter().map(|s| s.b).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(CostModelError::InsufficientData {
            needed: 2,
            got: distinct.len(),
        });
    }

    let n = T::from_count(samples.len());
    let xs = samples.iter().map(|s| T::from_count(s.b));
    let mean_x = xs.clone().sum::<T>() / n;
    let mean_y = samples.iter().map(|s| s.latency_ms).sum::<T>() / n;
    let (mut sxx, mut sxy) = (T::zero(), T::zero());
    for s in samples {
        let dx = T::from_count(s.b) - mean_x;
        sxx = sxx + dx * dx;
        sxy = sxy + dx * (s.latency_ms - mean_y);
    }
    let mut slope = sxy / sxx;
    let mut intercept = mean_y - slope * mean_x;
    let mut clamped = false;
    if slope < T::zero() {
        slope = T::zero();
        intercept = mean_y;
        clamped = true;
    } else if intercept < T::zero() {
        // Line through the origin.
        let (mut xx, mut xy) = (T::zero(), T::zero());
        for s in samples {
            let x = T::from_count(s.b);
            xx = xx + x * x;
            xy = xy + x * s.latency_ms;
        }
        slope = xy / xx;
        intercept = T::zero();
        clamped = true;
    }
    let model = AffineLatencyModel { slope, intercept };
    let sse = samples
        .iter()
        .map(|s| {
            let r = s.latency_ms - model.eval_batch(s.b);
            r * r
        })
        .sum::<T>();
    Ok(AffineFit {
        model,
        clamped,
        residual_rms: (sse / n).sqrt(),
    })
}
