//! Virtual-time rollout simulator.
//!
//! Each worker runs lockstep rounds over its batch. A round's length comes
//! from the cost model: plain decoding pays the baseline decode latency,
//! a serialized (coupled) round pays the draft passes plus one verification,
//! and a pipelined round pays the slower of its draft lane and verify lane.
//! Requests are verified token by token against a keyed stand-in for the
//! target model, so every policy must reproduce the same responses.

mod config;
mod engine;
mod metrics;
mod tokens;
mod window;

use thiserror::Error;

use crate::costmodel::CostModelError;
use crate::planner::PlanError;
use crate::workload::WorkloadError;

pub use config::{
    trace_means, trace_methods, LogLevel, Policy, PolicyStack, Recording, SimConfig,
    DEFAULT_RECONFIG_INTERVAL,
};
pub use engine::simulate;
pub use metrics::{
    Event, EventKind, OutcomeRecord, RequestMetrics, Segment, SegmentKind, SimMetrics, TgsPoint,
    WindowYield, WorkerMetrics,
};
pub use tokens::{generate_true_sequence, true_token, Drafter, TokenOracle, VOCAB_SIZE};
pub use window::{verify_window, VerificationOutcome, WindowState, WindowStatus};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] CostModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl SimError {
    /// Whether the error is a problem with the inputs rather than the run.
    pub fn is_config(&self) -> bool {
        !matches!(self, SimError::Invariant(_))
    }
}
