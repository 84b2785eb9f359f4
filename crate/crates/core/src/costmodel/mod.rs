//! Latency models and closed-form speculation performance.
//!
//! Draft and verification step latencies are affine in the batch size. On top
//! of them sit the acceptance PMF, expected tokens per window for pipelined
//! (decoupled) and serialized (coupled) speculation, iteration latency, and
//! token generation speed (TGS).

mod affine;
mod model;
mod speculation;

use thiserror::Error;

pub use affine::{fit_affine, AffineFit, AffineLatencyModel, ProfileSample};
pub use model::{CostModel, Placement, VerifyConfig};
pub use speculation::{accept_pmf, expected_tokens_coupled, expected_tokens_decoupled};

#[derive(Debug, Error, PartialEq)]
pub enum CostModelError {
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("drafting window must be at least 1")]
    ZeroWindow,
    #[error("accepted count {accepted} exceeds window {window}")]
    AcceptedAboveWindow { accepted: u32, window: u32 },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("need samples at {needed} distinct batch sizes, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid profile sample (b={b}, latency={latency_ms}ms)")]
    InvalidSample { b: usize, latency_ms: f64 },
    #[error("invalid latency model `{key}`: {reason}")]
    InvalidModel { key: String, reason: String },
    #[error("cost model has no entry for {0}")]
    MissingEntry(String),
}

pub(crate) fn check_probability<T: crate::Scalar>(p: T) -> Result<(), CostModelError> {
    if p >= T::zero() && p <= T::one() {
        Ok(())
    } else {
        Err(CostModelError::Probability(p.as_f64()))
    }
}

pub(crate) fn check_window(w: u32) -> Result<(), CostModelError> {
    if w == 0 {
        Err(CostModelError::ZeroWindow)
    } else {
        Ok(())
    }
}
