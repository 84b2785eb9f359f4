//! Rollout batches: requests, their latent lengths and acceptance rates, and
//! the online acceptance-rate estimator.

mod estimator;
mod trace;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use estimator::{AcceptanceEstimator, DEFAULT_ESTIMATOR_WINDOW};
pub use trace::{
    gen_trace, load_trace, parse_trace, save_trace, write_trace, BetaSpec, LengthSpec,
    PromptLenSpec, TraceSpec,
};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("accepted count {accepted} exceeds proposed count {proposed}")]
    AcceptedExceedsProposed { proposed: u32, accepted: u32 },
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("trace line {line}: {reason}")]
    Validation { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Speculation mode of a single request.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExecMode {
    /// Draft, then wait for the verdict before drafting again.
    Coupled,
    /// Draft the next window while the previous one is being verified.
    #[default]
    Decoupled,
}

impl ExecMode {
    /// Windows a request may have in flight in this mode.
    pub fn pipeline_depth(self) -> usize {
        match self {
            ExecMode::Coupled => 1,
            ExecMode::Decoupled => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            ExecMode::Coupled => "C",
            ExecMode::Decoupled => "D",
        }
    }
}

/// One rollout prompt plus its live speculation state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub prompt_len: u32,
    /// Response length; latent until the request is simulated.
    pub true_len: u32,
    /// Per drafting method, the probability a drafted token matches the target.
    pub latent_accept: BTreeMap<String, f64>,
    position: u32,
    mode: ExecMode,
    window: u32,
    rate_estimate: AcceptanceEstimator,
}

impl Request {
    pub fn new(
        id: u64,
        prompt_len: u32,
        true_len: u32,
        latent_accept: BTreeMap<String, f64>,
    ) -> Result<Self, WorkloadError> {
        if true_len == 0 {
            return Err(WorkloadError::Config {
                field: "true_len".into(),
                reason: format!("request {id} has an empty response"),
            });
        }
        if let Some((m, p)) = latent_accept
            .iter()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(WorkloadError::Config {
                field: format!("latent_accept.{m}"),
                reason: format!("probability {p} outside [0, 1]"),
            });
        }
        Ok(Self {
            id,
            prompt_len,
            true_len,
            latent_accept,
            position: 0,
            mode: ExecMode::Decoupled,
            window: 1,
            rate_estimate: AcceptanceEstimator::default(),
        })
    }

    pub fn position(&self) -> u32 {
        self.position
    }

    pub fn remaining(&self) -> u32 {
        self.true_len - self.position
    }

    pub fn is_finished(&self) -> bool {
        self.position == self.true_len
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    pub fn estimator(&self) -> &AcceptanceEstimator {
        &self.rate_estimate
    }

    pub fn estimator_mut(&mut self) -> &mut AcceptanceEstimator {
        &mut self.rate_estimate
    }

    pub fn accept_prob(&self, method: &str) -> Option<f64> {
        self.latent_accept.get(method).copied()
    }

    /// Resets live state before a simulation: position 0, the given initial
    /// mode and window, and a fresh estimator.
    pub fn reset_live(&mut self, mode: ExecMode, window: u32, estimator: AcceptanceEstimator) {
        self.position = 0;
        self.mode = mode;
        self.window = window.max(1);
        self.rate_estimate = estimator;
    }

    /// Sets mode and window. The only way a request changes mode after
    /// [`reset_live`](Self::reset_live).
    pub fn reconfigure(&mut self, mode: ExecMode, window: u32) {
        self.mode = mode;
        self.window = window.max(1);
    }

    /// Starts a copy of this request at `position` (used for Best-of-N replicas).
    pub fn fork_at(
        &self,
        position: u32,
        mode: ExecMode,
        window: u32,
        estimator: AcceptanceEstimator,
    ) -> Self {
        let mut r = self.clone();
        r.reset_live(mode, window, estimator);
        r.position = position.min(self.true_len);
        r
    }

    pub(crate) fn commit(&mut self, tokens: u32) {
        assert!(
            self.position + tokens <= self.true_len,
            "request {} committed past its end",
            self.id
        );
        self.position += tokens;
    }
}
