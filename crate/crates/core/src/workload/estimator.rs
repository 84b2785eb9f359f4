use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::WorkloadError;

/// Default number of verification outcomes kept by the estimator.
pub const DEFAULT_ESTIMATOR_WINDOW: usize = 64;

/// Sliding-window acceptance-rate estimator.
///
/// Keeps the last `K` verification outcomes and reports
/// `accepted / proposed` over them, or the prior before anything was recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceEstimator {
    capacity: usize,
    prior: f64,
    ring: VecDeque<(u32, u32)>,
    proposed: u64,
    accepted: u64,
}

impl AcceptanceEstimator {
    pub fn new(capacity: usize, prior: f64) -> Result<Self, WorkloadError> {
        if capacity == 0 {
            return Err(WorkloadError::Config {
                field: "estimator.window".into(),
                reason: "window must hold at least one outcome".into(),
            });
        }
        if !(0.0..=1.0).contains(&prior) {
            return Err(WorkloadError::Config {
                field: "estimator.prior".into(),
                reason: format!("prior {prior} outside [0, 1]"),
            });
        }
        Ok(Self {
            capacity,
            prior,
            ring: VecDeque::with_capacity(capacity),
            proposed: 0,
            accepted: 0,
        })
    }

    pub fn record(&mut self, proposed: u32, accepted: u32) -> Result<(), WorkloadError> {
        if accepted > proposed {
            return Err(WorkloadError::AcceptedExceedsProposed { proposed, accepted });
        }
        if self.ring.len() == self.capacity {
            if let Some((p, a)) = self.ring.pop_front() {
                self.proposed -= u64::from(p);
                self.accepted -= u64::from(a);
            }
        }
        self.ring.push_back((proposed, accepted));
        self.proposed += u64::from(proposed);
        self.accepted += u64::from(accepted);
        Ok(())
    }

    pub fn estimate(&self) -> f64 {
        if self.proposed == 0 {
            self.prior
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Number of outcomes currently in the window.
    pub fn observations(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

impl Default for AcceptanceEstimator {
    fn default() -> Self {
        Self::new(DEFAULT_ESTIMATOR_WINDOW, 0.5).expect("default estimator is valid")
    }
}
