//! Oracles and fixtures shared by the integration tests. Nothing here calls
//! into the closed forms or the search code it is used to check.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specroll::planner::{plain_plan, search_coupled_plan, search_plan};
use specroll::specsim::{trace_means, LogLevel, Policy, PolicyStack, Recording, SimConfig};
use specroll::workload::{gen_trace, BetaSpec, LengthSpec, PromptLenSpec};
use specroll::{AffineLatencyModel, CostModel, ExecutionPlan, Request, TraceSpec, VerifyConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn affine(slope: f64, intercept: f64) -> AffineLatencyModel<f64> {
    AffineLatencyModel { slope, intercept }
}

/// Expected committed tokens per window slot, summed term by term: a stop at
/// offset `a` commits `a + 1` tokens over two slots, a full accept `w` in one.
pub fn tau_oracle(p: f64, w: u32) -> f64 {
    let mut total = 0.0;
    for a in 0..w {
        total += p.powi(a as i32) * (1.0 - p) * f64::from(a + 1) / 2.0;
    }
    total + f64::from(w) * p.powi(w as i32)
}

/// Every stack the simulator accepts.
pub fn all_stacks() -> Vec<PolicyStack> {
    let mut out = Vec::new();
    for policy in [Policy::PlainDecode, Policy::CoupledSpec, Policy::Disaggregated, Policy::DecoupledSpec] {
        for reconfig in [false, true] {
            for bon in [false, true] {
                let s = PolicyStack { policy, reconfig, bon };
                if s.validate().is_ok() {
                    out.push(s);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Plan search oracle

/// `(config id, drafter GPUs, window, tgs)` of the best decoupled plan,
/// found by scanning every profiled window with no pruning.
pub type PlanKey = (String, u32, u32, f64);

pub fn exhaustive_plan(batch: usize, model: &CostModel<f64>, method: &str, p: f64) -> Option<PlanKey> {
    let mut best: Option<(PlanKey, u32)> = None;
    for config in &model.verify_configs {
        let table = &model.verify[&config.id];
        for (&g, draft) in &model.draft[method] {
            let gpus = g + config.gpus;
            if g > config.gpus || gpus > model.total_gpus {
                continue;
            }
            let b = (gpus as usize * batch).div_ceil(model.total_gpus as usize) as f64;
            let mut w = 1;
            while let Some(v) = table.get(&w) {
                let draft_ms = f64::from(w) * (draft.slope * b + draft.intercept);
                let verify_ms = v.slope * b + v.intercept;
                let tgs = tau_oracle(p, w) / draft_ms.max(verify_ms);
                let better = match &best {
                    None => true,
                    Some(((_, _, bw, bt), bg)) => {
                        let tie = 1e-12 * tgs.abs().max(bt.abs());
                        tgs > bt + tie || ((tgs - bt).abs() <= tie && (gpus, w) < (*bg, *bw))
                    }
                };
                if better {
                    best = Some(((config.id.clone(), g, w, tgs), gpus));
                }
                w += 1;
            }
        }
    }
    best.map(|(k, _)| k)
}

/// A random cluster: a few verification configurations with arbitrary
/// (not necessarily monotone) per-window verify costs and one drafter
/// profiled on a subset of GPU counts.
pub fn random_cost_model(r: &mut ChaCha8Rng) -> CostModel<f64> {
    let total_gpus = r.random_range(2..=16u32);
    let n_configs = r.random_range(1..=3usize);
    let mut verify_configs = Vec::new();
    let mut verify = BTreeMap::new();
    let mut baseline = BTreeMap::new();
    for i in 0..n_configs {
        let gpus = [1u32, 2, 4, 8][r.random_range(0..4)].min(total_gpus - 1);
        let id = format!("c{i}");
        let max_w = r.random_range(1..=16u32);
        let base_slope = r.random_range(0.01..2.0);
        let base_int = r.random_range(0.5..40.0);
        let table: BTreeMap<u32, AffineLatencyModel<f64>> = (1..=max_w)
            .map(|w| {
                let s = base_slope * (1.0 + r.random_range(0.0..0.6) * f64::from(w));
                let c = base_int + r.random_range(0.0..4.0) * f64::from(w);
                (w, affine(s, c))
            })
            .collect();
        baseline.insert(id.clone(), affine(base_slope, base_int));
        verify.insert(id.clone(), table);
        verify_configs.push(VerifyConfig { id, gpus, label: String::new() });
    }
    let mut drafts = BTreeMap::from([(1u32, affine(r.random_range(0.001..0.5), r.random_range(0.05..10.0)))]);
    for g in [2u32, 4] {
        if r.random_bool(0.5) {
            let k = 1.0 / (f64::from(g) * r.random_range(0.3..1.0));
            let d1 = drafts[&1];
            drafts.insert(g, affine(d1.slope * k, d1.intercept * r.random_range(0.5..1.2)));
        }
    }
    CostModel {
        total_gpus,
        verify_configs,
        draft: BTreeMap::from([("d".to_string(), drafts)]),
        verify,
        baseline,
    }
}

// ---------------------------------------------------------------------------
// Simulator fixtures

/// Single-GPU verifier with two drafters of different cost.
pub fn sim_model(total_gpus: u32) -> CostModel<f64> {
    CostModel {
        total_gpus,
        verify_configs: vec![VerifyConfig { id: "v".into(), gpus: 1, label: "tp1".into() }],
        draft: BTreeMap::from([
            ("d".into(), BTreeMap::from([(1, affine(0.01, 1.0))])),
            ("e".into(), BTreeMap::from([(1, affine(0.02, 0.5))])),
        ]),
        verify: BTreeMap::from([(
            "v".into(),
            (1..=8).map(|w| (w, affine(0.05 + 0.01 * f64::from(w), 2.0 + 0.1 * f64::from(w)))).collect(),
        )]),
        baseline: BTreeMap::from([("v".into(), affine(0.05, 2.0))]),
    }
}

/// A small long-tailed batch with both drafters.
pub fn random_trace(seed: u64, batch: usize) -> Vec<Request> {
    gen_trace(&TraceSpec {
        batch_size: batch,
        prompt_len: PromptLenSpec { min: 8, max: 64 },
        true_len: LengthSpec { mu: 4.5, sigma: 0.9, cap: 600 },
        methods: BTreeMap::from([
            ("d".to_string(), BetaSpec { a: 2.0, b: 2.0 }),
            ("e".to_string(), BetaSpec { a: 4.0, b: 1.5 }),
        ]),
        seed,
    })
    .expect("valid trace spec")
}

pub fn plan_for(stack: PolicyStack, batch: usize, model: &CostModel<f64>, p: f64) -> ExecutionPlan<f64> {
    let plan = match stack.policy {
        Policy::PlainDecode => plain_plan(batch, model),
        Policy::CoupledSpec => search_coupled_plan(batch, model, "d", p),
        Policy::Disaggregated | Policy::DecoupledSpec => search_plan(batch, model, "d", p),
    };
    plan.expect("plan exists")
}

/// Simulation with sequences and per-outcome records kept and the engine's
/// own audits switched on.
pub fn sim_config(stack: PolicyStack, trace: Vec<Request>, gpus: u32, seed: u64) -> SimConfig {
    let model = sim_model(gpus);
    let p = trace_means(&trace).get("d").copied().unwrap_or(0.5);
    let plan = plan_for(stack, trace.len().max(1), &model, p);
    let mut cfg = SimConfig::new(trace, model, stack, plan);
    if cfg.historical.is_empty() {
        cfg.historical = BTreeMap::from([("d".into(), p), ("e".into(), p)]);
    }
    cfg.seed = seed;
    cfg.reconfig_interval = 16;
    cfg.check_invariants = true;
    cfg.record = Recording { sequences: true, outcomes: true, series: false, segments: false, events: LogLevel::Sched };
    cfg
}
