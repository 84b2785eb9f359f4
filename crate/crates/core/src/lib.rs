//! Virtual-time simulation and scheduling for speculative decoding during
//! LLM rollout.
//!
//! The crate is organized bottom-up:
//!
//! * [`workload`]: rollout batches with heavy-tailed response lengths and
//!   per-method acceptance rates, plus the online acceptance estimator.
//! * [`costmodel`]: affine latency models, their least-squares fit, and the
//!   closed-form speculation math (acceptance PMF, expected tokens, iteration
//!   latency, token generation speed).
//! * [`planner`]: drafter/verifier placement search, per-request window and
//!   mode reconfiguration, the draft ladder and initial method selection.
//! * [`bon`]: greedy Best-of-N assignment of freed workers to extra drafters.
//! * [`specsim`]: the discrete-event engine that runs a rollout step under a
//!   policy stack with exact-match verification.
//! * [`experiment`]: scenario files and the sweep / ablation / timeline
//!   drivers behind the `specroll` binary.
//!
//! The latency models and the planner are generic over [`Scalar`]; the
//! simulator works in `f64` milliseconds.

pub mod bon;
pub mod costmodel;
pub mod experiment;
pub mod planner;
pub mod rng;
mod scalar;
pub mod specsim;
pub mod workload;

pub use scalar::Scalar;

pub use costmodel::{AffineLatencyModel, CostModel, CostModelError, Placement, ProfileSample, VerifyConfig};
pub use planner::{DraftLadder, ExecutionPlan, PlanError, PlanKind, RequestPlan};
pub use workload::{AcceptanceEstimator, ExecMode, Request, TraceSpec, WorkloadError};

/// Double-precision latency model.
pub type AffineLatencyModel64 = AffineLatencyModel<f64>;
/// Single-precision latency model.
pub type AffineLatencyModel32 = AffineLatencyModel<f32>;
pub type CostModel64 = CostModel<f64>;
pub type CostModel32 = CostModel<f32>;
pub type ExecutionPlan64 = ExecutionPlan<f64>;
pub type ExecutionPlan32 = ExecutionPlan<f32>;
pub type DraftLadder64 = DraftLadder<f64>;
