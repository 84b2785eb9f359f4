use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::workload::ExecMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Draft,
    Verify,
    Commit,
    Rollback,
    Finish,
    BonAssign,
    Reconfig,
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time_ms: f64,
    pub kind: EventKind,
    pub worker: usize,
    pub request: Option<u64>,
    pub payload: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RequestMetrics {
    pub id: u64,
    /// Worker the request started on.
    pub worker: usize,
    pub true_len: u32,
    pub finish_ms: f64,
    pub committed: u32,
    /// Summed over the request and all of its replicas.
    pub drafted: u64,
    pub wasted: u64,
    /// Drafted tokens still in flight when a replica was cancelled.
    pub cancelled: u64,
    pub bonus: u64,
    pub windows: u64,
    pub mis_speculations: u64,
    pub replicas: u32,
    /// Method of the execution that finished first.
    pub finished_by: String,
    pub won_by_replica: bool,
    pub final_estimate: f64,
    /// `(position, estimate)` at every reconfiguration checkpoint.
    pub acceptance_history: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkerMetrics {
    pub id: usize,
    pub gpus: u32,
    pub busy_ms: f64,
    pub idle_ms: f64,
    pub rounds: u64,
    pub last_event_ms: f64,
    /// Whether the worker hosted best-of-n replicas after draining.
    pub bon_host: bool,
}

impl WorkerMetrics {
    pub fn idle_fraction(&self) -> f64 {
        let total = self.busy_ms + self.idle_ms;
        if total > 0.0 { self.idle_ms / total } else { 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OutcomeRecord {
    pub request: u64,
    pub worker: usize,
    pub replica: bool,
    pub mode: ExecMode,
    /// Drafting window bounding this outcome's waste.
    pub window: u32,
    pub proposed: u32,
    pub accepted: u32,
    pub committed: u32,
    pub wasted: u32,
}

/// Tokens per drafting window under pipelined execution, where a fully
/// accepted window occupies one iteration and a partially accepted one
/// occupies two (its own and the discarded successor's).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct WindowYield {
    pub windows: u64,
    /// Sum over windows of committed tokens divided by iterations occupied.
    pub yield_sum: f64,
    pub committed: u64,
    pub iterations: u64,
}

impl WindowYield {
    /// Mean tokens per window slot, the quantity the closed form predicts.
    pub fn per_window(&self) -> f64 {
        if self.windows == 0 { 0.0 } else { self.yield_sum / self.windows as f64 }
    }

    /// Long-run tokens per iteration.
    pub fn per_iteration(&self) -> f64 {
        if self.iterations == 0 { 0.0 } else { self.committed as f64 / self.iterations as f64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TgsPoint {
    pub worker: usize,
    pub end_ms: f64,
    pub duration_ms: f64,
    pub tokens: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Decode,
    Speculate,
    Replica,
}

/// A stretch of back-to-back rounds on one worker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Segment {
    pub worker: usize,
    pub start_ms: f64,
    pub end_ms: f64,
    pub kind: SegmentKind,
    pub rounds: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SimMetrics {
    pub makespan_ms: f64,
    /// Makespan plus the fixed prepare/learn time.
    pub step_ms: f64,
    pub total_committed: u64,
    pub total_drafted: u64,
    pub total_wasted: u64,
    /// Committed tokens per millisecond of makespan.
    pub mean_tgs: f64,
    pub bon_assignments: u64,
    pub replica_wins: u64,
    pub reconfigurations: u64,
    pub requests: Vec<RequestMetrics>,
    pub workers: Vec<WorkerMetrics>,
    pub window_yield: WindowYield,
    /// Per-(mode, window) count of outcomes and of mis-speculations.
    #[serde(skip)]
    pub outcome_counts: BTreeMap<(ExecMode, u32), (u64, u64)>,
    pub outcomes: Vec<OutcomeRecord>,
    pub sequences: BTreeMap<u64, Vec<u32>>,
    pub events: Vec<Event>,
    pub series: Vec<TgsPoint>,
    pub segments: Vec<Segment>,
}

impl SimMetrics {
    pub fn request(&self, id: u64) -> Option<&RequestMetrics> {
        self.requests.iter().find(|r| r.id == id)
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &Event> + '_ {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Cluster tokens per millisecond in consecutive buckets of `bucket_ms`.
    pub fn tgs_buckets(&self, bucket_ms: f64) -> Vec<(f64, f64)> {
        if bucket_ms <= 0.0 || self.makespan_ms <= 0.0 {
            return Vec::new();
        }
        let n = (self.makespan_ms / bucket_ms).ceil() as usize;
        let mut tokens = vec![0.0; n.max(1)];
        for p in &self.series {
            let i = ((p.end_ms / bucket_ms).ceil() as usize).saturating_sub(1).min(tokens.len() - 1);
            tokens[i] += f64::from(p.tokens);
        }
        tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| ((i + 1) as f64 * bucket_ms, t / bucket_ms))
            .collect()
    }
}
