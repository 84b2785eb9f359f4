use log::warn;
use serde::{Deserialize, Serialize};

use super::{ExecutionPlan, PlanError};
use crate::costmodel::{CostModel, Placement};
use crate::scalar::{clearly_greater, nearly_equal};
use crate::workload::{ExecMode, Request};
use crate::Scalar;

/// Per-request drafting window and speculation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestPlan {
    pub request: u64,
    pub window: u32,
    pub mode: ExecMode,
}

/// Requests whose acceptance estimate is strictly below the mean estimate of
/// the batch. Requests without observations are ignored.
pub fn below_average(requests: &[Request]) -> Vec<&Request> {
    let observed: Vec<&Request> = requests.iter().filter(|r| !r.estimator().is_empty()).collect();
    if observed.is_empty() {
        return Vec::new();
    }
    let mean = observed.iter().map(|r| r.estimator().estimate()).sum::<f64>() / observed.len() as f64;
    below_threshold(requests, mean)
}

/// Requests with at least one observation and an estimate strictly below `threshold`.
pub fn below_threshold(requests: &[Request], threshold: f64) -> Vec<&Request> {
    requests
        .iter()
        .filter(|r| !r.estimator().is_empty() && r.estimator().estimate() < threshold)
        .collect()
}

/// Window in `1..=limit` with the highest single-request TGS in `mode`;
/// ties go to the smaller window.
pub fn best_window<T: Scalar>(
    model: &CostModel<T>,
    at: Placement<'_>,
    limit: u32,
    p: T,
    mode: ExecMode,
) -> Result<(u32, T), PlanError> {
    let mut best: Option<(u32, T)> = None;
    for w in 1..=limit.max(1) {
        let tgs = match mode {
            ExecMode::Coupled => model.tgs_coupled(at, w, 1, p)?,
            ExecMode::Decoupled => model.tgs_decoupled(at, w, 1, p)?,
        };
        if best.is_none_or(|(_, b)| clearly_greater(tgs, b)) {
            best = Some((w, tgs));
        }
    }
    Ok(best.expect("at least one window evaluated"))
}

/// For each request, picks the better of the best coupled and best decoupled
/// window at batch size one, using the request's current acceptance estimate.
/// Equal estimates keep the request's current mode.
pub fn reconfigure<T: Scalar>(
    plan: &ExecutionPlan<T>,
    requests: &[&Request],
    model: &CostModel<T>,
) -> Result<Vec<RequestPlan>, PlanError> {
    let at = plan.placement();
    let limit = plan.window_limit.max(1);
    let mut out = Vec::with_capacity(requests.len());
    for r in requests {
        if r.estimator().is_empty() {
            warn!("request {} has no acceptance observations; skipped", r.id);
            continue;
        }
        let p = T::lit(r.estimator().estimate());
        let (wc, tc) = best_window(model, at, limit, p, ExecMode::Coupled)?;
        let (wd, td) = best_window(model, at, limit, p, ExecMode::Decoupled)?;
        let (window, mode) = if nearly_equal(tc, td) {
            match r.mode() {
                ExecMode::Coupled => (wc, ExecMode::Coupled),
                ExecMode::Decoupled => (wd, ExecMode::Decoupled),
            }
        } else if tc > td {
            (wc, ExecMode::Coupled)
        } else {
            (wd, ExecMode::Decoupled)
        };
        out.push(RequestPlan { request: r.id, window, mode });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{AffineLatencyModel, VerifyConfig};
    use crate::planner::{window_limit, PlanKind};
    use crate::workload::AcceptanceEstimator;
    use std::collections::BTreeMap;

    fn flat_model(d: f64, v: f64) -> CostModel<f64> {
        let m = |x: f64| AffineLatencyModel { slope: 0.0, intercept: x };
        CostModel {
            total_gpus: 2,
            verify_configs: vec![VerifyConfig { id: "v".into(), gpus: 1, label: String::new() }],
            draft: BTreeMap::from([("d".into(), BTreeMap::from([(1, m(d))]))]),
            verify: BTreeMap::from([("v".into(), (1..=8).map(|w| (w, m(v))).collect())]),
            baseline: BTreeMap::from([("v".into(), m(v))]),
        }
    }

    fn plan_for(model: &CostModel<f64>) -> ExecutionPlan<f64> {
        let at = Placement { method: "d", draft_gpus: 1, config: "v" };
        ExecutionPlan {
            kind: PlanKind::Decoupled,
            method: "d".into(),
            draft_gpus: 1,
            config: model.verify_configs[0].clone(),
            window: 1,
            window_limit: window_limit(model, at).unwrap(),
            tgs_estimate: 0.0,
            per_worker_batch: 1,
        }
    }

    fn request(id: u64, outcomes: &[(u32, u32)]) -> Request {
        let mut r = Request::new(id, 1, 100, BTreeMap::new()).unwrap();
        let mut est = AcceptanceEstimator::new(64, 0.5).unwrap();
        for &(p, a) in outcomes {
            est.record(p, a).unwrap();
        }
        r.reset_live(ExecMode::Decoupled, 2, est);
        r
    }

    #[test]
    fn perfect_acceptance_keeps_decoupled_with_largest_window() {
        let model = flat_model(1.0, 2.0);
        let plan = plan_for(&model);
        assert_eq!(plan.window_limit, 2);
        let r = request(1, &[(4, 4)]);
        let out = reconfigure(&plan, &[&r], &model).unwrap();
        assert_eq!(out, vec![RequestPlan { request: 1, window: 2, mode: ExecMode::Decoupled }]);
    }

    #[test]
    fn low_acceptance_switches_to_coupled() {
        let model = flat_model(1.0, 2.0);
        let plan = plan_for(&model);
        // estimate 0.02
        let r = request(7, &[(50, 1)]);
        let out = reconfigure(&plan, &[&r], &model).unwrap();
        assert_eq!(out[0].mode, ExecMode::Coupled);
        // Independent check of the closed forms at w = 1 (the best window for both).
        let p: f64 = 0.02;
        let coupled = (1.0 + p) / (1.0 + 2.0);
        let decoupled = ((1.0 - p) * 0.5 + p) / 2.0;
        assert!(coupled > decoupled);
    }

    #[test]
    fn uniform_batch_selects_nobody() {
        let batch: Vec<Request> = (0..4).map(|i| request(i, &[(10, 7)])).collect();
        assert!(below_average(&batch).is_empty());
        let mixed = vec![request(0, &[(10, 2)]), request(1, &[(10, 9)]), request(2, &[])];
        let ids: Vec<u64> = below_average(&mixed).iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![0]);
    }

    #[test]
    fn unobserved_requests_are_skipped() {
        let model = flat_model(1.0, 2.0);
        let plan = plan_for(&model);
        let r = request(3, &[]);
        assert!(reconfigure(&plan, &[&r], &model).unwrap().is_empty());
    }

    #[test]
    fn idempotent_on_unchanged_estimates() {
        let model = flat_model(1.0, 3.0);
        let plan = plan_for(&model);
        let rs: Vec<Request> = (0..5).map(|i| request(i, &[(10, i as u32 * 2)])).collect();
        let refs: Vec<&Request> = rs.iter().collect();
        let a = reconfigure(&plan, &refs, &model).unwrap();
        let b = reconfigure(&plan, &refs, &model).unwrap();
        assert_eq!(a, b);
    }
}
