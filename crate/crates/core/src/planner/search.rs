use serde::{Deserialize, Serialize};

use super::PlanError;
use crate::costmodel::{check_probability, CostModel, CostModelError, Placement, VerifyConfig};
use crate::scalar::{clearly_greater, nearly_equal};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanKind {
    /// Autoregressive decoding on `config.gpus` GPUs per worker.
    Plain,
    /// Drafter co-located with the verifier; draft and verify serialize.
    Coupled,
    /// Drafter on its own `draft_gpus` GPUs, pipelined with the verifier.
    Decoupled,
}

/// A placement and drafting window for a rollout step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan<T> {
    pub kind: PlanKind,
    pub method: String,
    pub draft_gpus: u32,
    pub config: VerifyConfig,
    pub window: u32,
    /// Upper end of the window range this plan was searched over.
    pub window_limit: u32,
    pub tgs_estimate: T,
    pub per_worker_batch: usize,
}

impl<T: Scalar> ExecutionPlan<T> {
    pub fn placement(&self) -> Placement<'_> {
        Placement {
            method: &self.method,
            draft_gpus: self.draft_gpus.max(1),
            config: &self.config.id,
        }
    }

    /// GPUs occupied by one worker under this plan.
    pub fn worker_gpus(&self) -> u32 {
        match self.kind {
            PlanKind::Plain | PlanKind::Coupled => self.config.gpus,
            PlanKind::Decoupled => self.config.gpus + self.draft_gpus,
        }
    }
}

/// One row of the plan enumeration table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanCandidate<T> {
    pub config: String,
    pub verify_gpus: u32,
    pub draft_gpus: u32,
    pub window: u32,
    pub batch: usize,
    pub tgs: T,
    /// Whether the window lies inside the pruned search range.
    pub searched: bool,
}

fn per_worker_batch(gpus: u32, batch: usize, total_gpus: u32) -> usize {
    (gpus as usize * batch).div_ceil(total_gpus as usize)
}

/// Whether the drafter was profiled at `draft_gpus`; an unknown method is an error.
fn profiled<T: Scalar>(model: &CostModel<T>, method: &str, draft_gpus: u32) -> Result<bool, PlanError> {
    let by_gpus = model
        .draft
        .get(method)
        .ok_or_else(|| CostModelError::MissingEntry(format!("draft[{method}]")))?;
    Ok(by_gpus.contains_key(&draft_gpus))
}

fn ceil_ratio<T: Scalar>(num: T, den: T) -> u64 {
    if den > T::zero() {
        (num / den).ceil().to_u64().unwrap_or(u64::MAX)
    } else if num > T::zero() {
        u64::MAX
    } else {
        0
    }
}

/// Window bound for a draft/verify pair.
///
/// Walks `w = 1, 2, ...` and stops at the first `w` where
/// `w >= max(ceil(V'_w / D'), ceil(beta_w / alpha))`: from there on the
/// drafter is the slower lane at every batch size, and since expected tokens
/// per window slot never grow with `w`, larger windows cannot do better.
pub fn window_limit<T: Scalar>(model: &CostModel<T>, at: Placement<'_>) -> Result<u32, PlanError> {
    let max_w = model.max_window(at.config);
    if max_w == 0 {
        return Err(CostModelError::MissingEntry(format!("verify[{}][1]", at.config)).into());
    }
    let draft = model.draft_model(at.method, at.draft_gpus)?;
    for w in 1..=max_w {
        let verify = model.verify_model(at.config, w)?;
        let bound = ceil_ratio(verify.slope, draft.slope).max(ceil_ratio(verify.intercept, draft.intercept));
        if u64::from(w) >= bound {
            return Ok(w);
        }
    }
    Ok(max_w)
}

fn check_inputs<T: Scalar>(batch: usize, model: &CostModel<T>, p: T) -> Result<(), PlanError> {
    if batch == 0 {
        return Err(PlanError::Config("global batch size must be at least 1".into()));
    }
    if model.verify_configs.is_empty() {
        return Err(PlanError::Config("no verification configurations".into()));
    }
    check_probability(p)?;
    Ok(())
}

/// Better under the plan tie-breaking order: higher TGS, then fewer GPUs,
/// then a smaller window.
fn improves<T: Scalar>(tgs: T, gpus: u32, w: u32, best: &Option<(T, u32, u32)>) -> bool {
    match best {
        None => true,
        Some((bt, bg, bw)) => {
            clearly_greater(tgs, *bt) || (nearly_equal(tgs, *bt) && (gpus, w) < (*bg, *bw))
        }
    }
}

/// Enumerates verification configurations, drafter GPU counts up to the
/// verifier's, and windows up to [`window_limit`], returning the plan with the
/// highest estimated decoupled TGS at the per-worker batch size.
pub fn search_plan<T: Scalar>(
    batch: usize,
    model: &CostModel<T>,
    method: &str,
    p: T,
) -> Result<ExecutionPlan<T>, PlanError> {
    check_inputs(batch, model, p)?;
    let mut best: Option<(T, u32, u32)> = None;
    let mut chosen: Option<ExecutionPlan<T>> = None;
    for config in &model.verify_configs {
        for draft_gpus in 1..=config.gpus {
            let gpus = draft_gpus + config.gpus;
            if gpus > model.total_gpus || !profiled(model, method, draft_gpus)? {
                continue;
            }
            let b = per_worker_batch(gpus, batch, model.total_gpus);
            let at = Placement { method, draft_gpus, config: &config.id };
            let limit = window_limit(model, at)?;
            for w in 1..=limit {
                let tgs = model.tgs_decoupled(at, w, b, p)?;
                if tgs > T::zero() && improves(tgs, gpus, w, &best) {
                    best = Some((tgs, gpus, w));
                    chosen = Some(ExecutionPlan {
                        kind: PlanKind::Decoupled,
                        method: method.to_string(),
                        draft_gpus,
                        config: config.clone(),
                        window: w,
                        window_limit: limit,
                        tgs_estimate: tgs,
                        per_worker_batch: b,
                    });
                }
            }
        }
    }
    chosen.ok_or_else(|| {
        PlanError::Infeasible(format!(
            "no drafter/verifier pair fits in {} GPUs",
            model.total_gpus
        ))
    })
}

/// Full enumeration table behind [`search_plan`], including windows beyond the
/// prune bound (up to the largest profiled window).
pub fn enumerate_plans<T: Scalar>(
    batch: usize,
    model: &CostModel<T>,
    method: &str,
    p: T,
) -> Result<Vec<PlanCandidate<T>>, PlanError> {
    check_inputs(batch, model, p)?;
    let mut rows = Vec::new();
    for config in &model.verify_configs {
        for draft_gpus in 1..=config.gpus {
            let gpus = draft_gpus + config.gpus;
            if gpus > model.total_gpus || !profiled(model, method, draft_gpus)? {
                continue;
            }
            let b = per_worker_batch(gpus, batch, model.total_gpus);
            let at = Placement { method, draft_gpus, config: &config.id };
            let limit = window_limit(model, at)?;
            for w in 1..=model.max_window(&config.id) {
                rows.push(PlanCandidate {
                    config: config.id.clone(),
                    verify_gpus: config.gpus,
                    draft_gpus,
                    window: w,
                    batch: b,
                    tgs: model.tgs_decoupled(at, w, b, p)?,
                    searched: w <= limit,
                });
            }
        }
    }
    Ok(rows)
}

/// Best serialized speculation plan: drafter on one of the verifier's GPUs,
/// workers of `config.gpus` GPUs, window maximizing coupled TGS.
pub fn search_coupled_plan<T: Scalar>(
    batch: usize,
    model: &CostModel<T>,
    method: &str,
    p: T,
) -> Result<ExecutionPlan<T>, PlanError> {
    check_inputs(batch, model, p)?;
    let mut best: Option<(T, u32, u32)> = None;
    let mut chosen = None;
    for config in &model.verify_configs {
        let b = per_worker_batch(config.gpus, batch, model.total_gpus);
        let at = Placement { method, draft_gpus: 1, config: &config.id };
        let limit = model.max_window(&config.id);
        for w in 1..=limit {
            let tgs = model.tgs_coupled(at, w, b, p)?;
            if improves(tgs, config.gpus, w, &best) {
                best = Some((tgs, config.gpus, w));
                chosen = Some(ExecutionPlan {
                    kind: PlanKind::Coupled,
                    method: method.to_string(),
                    draft_gpus: 1,
                    config: config.clone(),
                    window: w,
                    window_limit: limit,
                    tgs_estimate: tgs,
                    per_worker_batch: b,
                });
            }
        }
    }
    chosen.ok_or_else(|| PlanError::Infeasible("no verification window profiled".into()))
}

/// Plain decoding placement: the configuration with the highest per-request
/// decode speed at its per-worker batch size.
pub fn plain_plan<T: Scalar>(batch: usize, model: &CostModel<T>) -> Result<ExecutionPlan<T>, PlanError> {
    check_inputs(batch, model, T::zero())?;
    let mut best: Option<(T, u32, u32)> = None;
    let mut chosen = None;
    for config in &model.verify_configs {
        let b = per_worker_batch(config.gpus, batch, model.total_gpus);
        let tgs = model.tgs_plain(&config.id, b)?;
        if improves(tgs, config.gpus, 1, &best) {
            best = Some((tgs, config.gpus, 1));
            chosen = Some(ExecutionPlan {
                kind: PlanKind::Plain,
                method: String::new(),
                draft_gpus: 0,
                config: config.clone(),
                window: 1,
                window_limit: 1,
                tgs_estimate: tgs,
                per_worker_batch: b,
            });
        }
    }
    chosen.ok_or_else(|| PlanError::Infeasible("no baseline model".into()))
}
