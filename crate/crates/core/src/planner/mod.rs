//! Placement search, per-request reconfiguration, and drafting-method
//! selection.

mod ladder;
mod reconfig;
mod search;

use thiserror::Error;

use crate::costmodel::CostModelError;

pub use ladder::{build_ladder, default_grid, initial_select, DraftLadder, PLAIN_METHOD};
pub use reconfig::{below_average, below_threshold, best_window, reconfigure, RequestPlan};
pub use search::{
    enumerate_plans, plain_plan, search_coupled_plan, search_plan, window_limit, ExecutionPlan,
    PlanCandidate, PlanKind,
};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no feasible plan: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Model(#[from] CostModelError),
}
