//! Best-of-N drafting on freed workers.
//!
//! When a worker drains, it is handed to the drafting method that currently
//! has the fewest workers, and each method's workers are then packed with the
//! lowest-acceptance requests up to `b_max` verification slots per worker.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::costmodel::AffineLatencyModel;
use crate::Scalar;

pub type WorkerId = usize;

/// Per-worker verification capacity used when `b_max` is not configured.
pub const DEFAULT_B_MAX: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkerStatus {
    Busy,
    Freed,
}

/// Snapshot of which workers serve which drafting method.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    status: BTreeMap<WorkerId, WorkerStatus>,
    members: BTreeMap<String, BTreeSet<WorkerId>>,
    load: BTreeMap<WorkerId, usize>,
    b_max: usize,
}

impl ClusterState {
    pub fn new(b_max: usize) -> Self {
        Self {
            status: BTreeMap::new(),
            members: BTreeMap::new(),
            load: BTreeMap::new(),
            b_max,
        }
    }

    pub fn b_max(&self) -> usize {
        self.b_max
    }

    pub fn add_worker(&mut self, worker: WorkerId, status: WorkerStatus, load: usize) {
        self.status.insert(worker, status);
        self.load.insert(worker, load);
    }

    pub fn status(&self, worker: WorkerId) -> Option<WorkerStatus> {
        self.status.get(&worker).copied()
    }

    pub fn load(&self, worker: WorkerId) -> usize {
        self.load.get(&worker).copied().unwrap_or(0)
    }

    pub fn set_load(&mut self, worker: WorkerId, load: usize) {
        self.load.insert(worker, load);
    }

    /// Workers serving `method`, in id order.
    pub fn members(&self, method: &str) -> impl Iterator<Item = WorkerId> + '_ {
        self.members.get(method).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn member_count(&self, method: &str) -> usize {
        self.members.get(method).map_or(0, BTreeSet::len)
    }

    pub fn method_of(&self, worker: WorkerId) -> Option<&str> {
        self.members
            .iter()
            .find(|(_, set)| set.contains(&worker))
            .map(|(m, _)| m.as_str())
    }

    /// Moves `worker` into the set serving `method`, leaving any previous set.
    pub fn join(&mut self, worker: WorkerId, method: &str) {
        self.leave(worker);
        self.members.entry(method.to_string()).or_default().insert(worker);
        self.status.insert(worker, WorkerStatus::Busy);
        self.load.entry(worker).or_insert(0);
    }

    pub fn leave(&mut self, worker: WorkerId) {
        for set in self.members.values_mut() {
            set.remove(&worker);
        }
    }

    /// Marks a drained worker as freed and drops it from its method set.
    pub fn release(&mut self, worker: WorkerId) {
        self.leave(worker);
        self.status.insert(worker, WorkerStatus::Freed);
        self.load.insert(worker, 0);
    }
}

/// A request as seen by the Best-of-N scheduler.
#[derive(Clone, Debug, PartialEq)]
pub struct BonCandidate {
    pub request: u64,
    /// Current acceptance-rate estimate.
    pub rate: f64,
    /// Methods already drafting for this request.
    pub held: BTreeSet<String>,
}

/// `(request, method) -> worker`.
pub type BonAssignment = BTreeMap<(u64, String), WorkerId>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BonPolicy {
    /// Method by method, filling each method's workers with the
    /// lowest-acceptance requests first.
    #[default]
    Greedy,
    /// Request by request (lowest acceptance first), giving each request every
    /// method that still has capacity before moving on.
    DepthFirst,
}

fn sorted_by_rate(active: &[BonCandidate]) -> Vec<&BonCandidate> {
    let mut v: Vec<&BonCandidate> = active.iter().collect();
    v.sort_by(|a, b| a.rate.total_cmp(&b.rate).then(a.request.cmp(&b.request)));
    v
}

/// Assigns freed workers to methods and requests to those methods' workers.
///
/// `state` is updated in place: freed workers join their method's set and
/// per-worker loads grow with every assignment.
pub fn assign_bon(
    active: &[BonCandidate],
    methods: &[String],
    freed: &[WorkerId],
    state: &mut ClusterState,
    policy: BonPolicy,
) -> BonAssignment {
    let mut out = BonAssignment::new();
    if freed.is_empty() || methods.is_empty() {
        return out;
    }
    for &w in freed {
        let mut target = &methods[0];
        for m in methods {
            if state.member_count(m) < state.member_count(target) {
                target = m;
            }
        }
        state.join(w, target);
    }

    let b_max = state.b_max;
    match policy {
        BonPolicy::Greedy => {
            for d in methods {
                let mut queue = sorted_by_rate(active).into_iter();
                let workers: Vec<WorkerId> = state.members(d).collect();
                'workers: for w in workers {
                    while state.load(w) < b_max {
                        let Some(r) = queue.next() else { break 'workers };
                        if r.held.contains(d) || out.contains_key(&(r.request, d.clone())) {
                            continue;
                        }
                        out.insert((r.request, d.clone()), w);
                        state.set_load(w, state.load(w) + 1);
                    }
                }
            }
        }
        BonPolicy::DepthFirst => {
            for r in sorted_by_rate(active) {
                for d in methods {
                    if r.held.contains(d) || out.contains_key(&(r.request, d.clone())) {
                        continue;
                    }
                    let slot = state.members(d).find(|&w| state.load(w) < b_max);
                    if let Some(w) = slot {
                        out.insert((r.request, d.clone()), w);
                        state.set_load(w, state.load(w) + 1);
                    }
                }
            }
        }
    }
    out
}

/// Latency charged before a new replica drafts its first token: a constant
/// for bringing up the drafter plus an affine term in the request's committed
/// length for rebuilding its KV cache.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleCost<T> {
    pub model_scale_ms: T,
    pub kv_scale: AffineLatencyModel<T>,
}

impl<T: Scalar> ScaleCost<T> {
    pub fn free() -> Self {
        Self {
            model_scale_ms: T::zero(),
            kv_scale: AffineLatencyModel::zero(),
        }
    }
}

pub fn scale_charge<T: Scalar>(position: u32, cost: &ScaleCost<T>) -> T {
    cost.model_scale_ms + cost.kv_scale.eval(T::from_count(position as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(id: u64, rate: f64) -> BonCandidate {
        BonCandidate { request: id, rate, held: BTreeSet::new() }
    }

    fn methods(ms: &[&str]) -> Vec<String> {
        ms.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn no_freed_workers() {
        let mut st = ClusterState::new(2);
        let out = assign_bon(&[cand(1, 0.2)], &methods(&["d"]), &[], &mut st, BonPolicy::Greedy);
        assert!(out.is_empty());
    }

    #[test]
    fn hand_traced_two_methods() {
        let mut st = ClusterState::new(2);
        st.add_worker(1, WorkerStatus::Freed, 0);
        st.add_worker(2, WorkerStatus::Freed, 0);
        let active = [cand(1, 0.2), cand(2, 0.5), cand(3, 0.9)];
        let out = assign_bon(&active, &methods(&["d1", "d2"]), &[1, 2], &mut st, BonPolicy::Greedy);
        let expected = BonAssignment::from([
            ((1, "d1".to_string()), 1),
            ((2, "d1".to_string()), 1),
            ((1, "d2".to_string()), 2),
            ((2, "d2".to_string()), 2),
        ]);
        assert_eq!(out, expected);
        assert_eq!(st.load(1), 2);
        assert_eq!(st.load(2), 2);
    }

    #[test]
    fn lowest_rate_wins_single_slot() {
        let mut st = ClusterState::new(1);
        let active = [cand(2, 0.6), cand(1, 0.3)];
        let out = assign_bon(&active, &methods(&["d"]), &[9], &mut st, BonPolicy::Greedy);
        assert_eq!(out, BonAssignment::from([((1, "d".to_string()), 9)]));
    }

    #[test]
    fn held_methods_are_not_duplicated() {
        let mut st = ClusterState::new(4);
        let mut r1 = cand(1, 0.1);
        r1.held.insert("d".into());
        let out = assign_bon(&[r1, cand(2, 0.4)], &methods(&["d"]), &[0], &mut st, BonPolicy::Greedy);
        assert_eq!(out, BonAssignment::from([((2, "d".to_string()), 0)]));
    }

    #[test]
    fn freed_worker_goes_to_smallest_method() {
        let mut st = ClusterState::new(4);
        st.join(10, "a");
        st.join(11, "a");
        st.join(12, "b");
        assign_bon(&[], &methods(&["a", "b", "c"]), &[20, 21, 22], &mut st, BonPolicy::Greedy);
        assert_eq!(st.method_of(20), Some("c"));
        assert_eq!(st.method_of(21), Some("b"));
        assert_eq!(st.method_of(22), Some("c"));
    }

    #[test]
    fn depth_first_gives_lowest_request_every_method() {
        let mut st = ClusterState::new(1);
        let active = [cand(1, 0.2), cand(2, 0.5)];
        let out = assign_bon(&active, &methods(&["d1", "d2"]), &[1, 2], &mut st, BonPolicy::DepthFirst);
        assert_eq!(
            out,
            BonAssignment::from([((1, "d1".to_string()), 1), ((1, "d2".to_string()), 2)])
        );
    }

    #[test]
    fn scale_charges() {
        let mut cost = ScaleCost {
            model_scale_ms: 50.0,
            kv_scale: AffineLatencyModel { slope: 0.01, intercept: 0.0 },
        };
        assert_eq!(scale_charge(0, &cost), 50.0);
        assert!((scale_charge(10_000, &cost) - 150.0f64).abs() < 1e-9);
        cost.kv_scale = AffineLatencyModel::zero();
        assert_eq!(scale_charge(12_345, &cost), 50.0);
    }

    proptest! {
        #[test]
        fn capacity_balance_and_priority(
            b_max in 1usize..5,
            prior in proptest::collection::vec(0usize..4, 3),
            n_freed in 0usize..6,
            rates in proptest::collection::vec(0.0f64..1.0, 0..12),
            held in proptest::collection::vec(0usize..4, 0..12),
            depth_first in any::<bool>(),
        ) {
            let ms = methods(&["a", "b", "c"]);
            let mut st = ClusterState::new(b_max);
            let mut next = 0;
            for (i, &n) in prior.iter().enumerate() {
                for _ in 0..n {
                    st.add_worker(next, WorkerStatus::Busy, b_max);
                    st.join(next, &ms[i]);
                    st.set_load(next, b_max);
                    next += 1;
                }
            }
            let freed: Vec<WorkerId> = (next..next + n_freed).collect();
            let active: Vec<BonCandidate> = rates.iter().enumerate().map(|(i, &r)| {
                let mut c = cand(i as u64, r);
                if let Some(&h) = held.get(i) {
                    if h < 3 { c.held.insert(ms[h].clone()); }
                }
                c
            }).collect();
            let policy = if depth_first { BonPolicy::DepthFirst } else { BonPolicy::Greedy };
            let out = assign_bon(&active, &ms, &freed, &mut st, policy);

            for w in 0..next + n_freed {
                prop_assert!(st.load(w) <= b_max);
            }
            let counts: Vec<usize> = ms.iter().map(|m| st.member_count(m)).collect();
            let touched: Vec<usize> = ms.iter().enumerate()
                .filter(|(i, m)| st.member_count(m) > prior[*i])
                .map(|(i, _)| counts[i]).collect();
            if let (Some(mx), Some(mn)) = (touched.iter().max(), counts.iter().min()) {
                prop_assert!(mx - mn <= 1);
            }
            for ((r, d), _) in &out {
                prop_assert!(!active[*r as usize].held.contains(d));
            }
            if !depth_first {
                for ((y, d), _) in &out {
                    let ry = active[*y as usize].rate;
                    for x in &active {
                        if x.rate < ry && !x.held.contains(d) {
                            prop_assert!(out.contains_key(&(x.request, d.clone())));
                        }
                    }
                }
            }
        }
    }
}
