use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::Report;
use super::{ExperimentError, Scenario};
use crate::costmodel::{fit_affine, CostModel, ProfileSample, VerifyConfig};
use crate::planner::{
    build_ladder, default_grid, enumerate_plans, initial_select, plain_plan, search_coupled_plan,
    search_plan, DraftLadder, ExecutionPlan, PlanError,
};
use crate::scalar::clearly_greater;
use crate::specsim::{simulate, LogLevel, Policy, PolicyStack, Recording, SimConfig, SimMetrics};

/// Drafting method a stack starts with: the ladder's pick when the stack
/// reconfigures, the scenario default otherwise.
pub fn select_method(
    scenario: &Scenario,
    stack: PolicyStack,
    batch: usize,
) -> Result<String, ExperimentError> {
    if stack.reconfig {
        let ladder = ladder_for(scenario, batch)?;
        Ok(initial_select(&ladder, &scenario.historical)?)
    } else {
        Ok(scenario.config.default_method.clone())
    }
}

/// Ladder over the verification configuration the default method's
/// decoupled plan uses at `batch`.
fn ladder_for(scenario: &Scenario, batch: usize) -> Result<DraftLadder<f64>, ExperimentError> {
    let method = &scenario.config.default_method;
    let plan = search_plan(batch, &scenario.model, method, scenario.historical[method])?;
    let grid = default_grid(scenario.config.ladder_step);
    Ok(build_ladder(&scenario.methods, &grid, &scenario.model, &plan.config.id)?)
}

/// Placement and window for a stack at total batch size `batch`.
pub fn build_plan(
    scenario: &Scenario,
    stack: PolicyStack,
    batch: usize,
) -> Result<ExecutionPlan<f64>, ExperimentError> {
    let model = &scenario.model;
    if stack.policy == Policy::PlainDecode {
        return Ok(plain_plan(batch, model)?);
    }
    let method = select_method(scenario, stack, batch)?;
    let p = scenario.historical[&method];
    Ok(match stack.policy {
        Policy::PlainDecode => unreachable!("handled above"),
        Policy::CoupledSpec => search_coupled_plan(batch, model, &method, p)?,
        Policy::DecoupledSpec => search_plan(batch, model, &method, p)?,
        Policy::Disaggregated => {
            // Decoupled placement, but windows sized for serialized execution.
            let mut plan = search_plan(batch, model, &method, p)?;
            let at = plan.placement();
            let mut best: Option<(u32, f64)> = None;
            for w in 1..=model.max_window(at.config) {
                let tgs = model.tgs_coupled(at, w, plan.per_worker_batch, p)?;
                if best.is_none_or(|(_, b)| clearly_greater(tgs, b)) {
                    best = Some((w, tgs));
                }
            }
            let (w, tgs) = best.ok_or_else(|| PlanError::Infeasible("no verification window profiled".into()))?;
            plan.window = w;
            plan.window_limit = plan.window_limit.max(w);
            plan.tgs_estimate = tgs;
            plan
        }
    })
}

/// One simulated rollout step.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub stack: PolicyStack,
    pub seed: u64,
    pub batch: usize,
    pub plan: ExecutionPlan<f64>,
    pub metrics: SimMetrics,
}

pub fn run_one(
    scenario: &Scenario,
    stack: PolicyStack,
    seed: u64,
    batch: Option<usize>,
    record: Recording,
) -> Result<RunResult, ExperimentError> {
    let trace = scenario.trace(seed, batch)?;
    let batch = trace.len();
    let plan = build_plan(scenario, stack, batch)?;
    let knobs = &scenario.config.sim;
    let mut cfg = SimConfig::new(trace, scenario.model.clone(), stack, plan.clone());
    cfg.methods = scenario.methods.clone();
    cfg.historical = scenario.historical.clone();
    cfg.bonus_token = knobs.bonus_token;
    cfg.seed = seed;
    cfg.prepare_learn_ms = knobs.prepare_learn_ms;
    cfg.b_max = knobs.b_max;
    cfg.bon_policy = knobs.bon_policy;
    cfg.scale = knobs.scale;
    cfg.reconfig_interval = knobs.reconfig_interval;
    cfg.estimator_window = knobs.estimator_window;
    cfg.record = record;
    cfg.check_invariants = knobs.check_invariants;
    let metrics = simulate(&cfg)?;
    Ok(RunResult { stack, seed, batch, plan, metrics })
}

/// FNV-1a over every committed sequence, in request order.
pub fn sequence_digest(metrics: &SimMetrics) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (id, seq) in &metrics.sequences {
        eat(*id);
        eat(seq.len() as u64);
        for &t in seq {
            eat(u64::from(t));
        }
    }
    format!("{h:016x}")
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn throughput(m: &SimMetrics) -> f64 {
    m.mean_tgs
}

fn worker_count(m: &SimMetrics) -> usize {
    m.workers.len()
}

// ---- simulate -------------------------------------------------------------

#[derive(Serialize)]
struct RequestRow<'a> {
    seed: u64,
    id: u64,
    worker: usize,
    true_len: u32,
    finish_ms: f64,
    committed: u32,
    drafted: u64,
    wasted: u64,
    cancelled: u64,
    windows: u64,
    mis_speculations: u64,
    replicas: u32,
    finished_by: &'a str,
    won_by_replica: bool,
    final_estimate: f64,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    stack: PolicyStack,
    batch: usize,
    plan: &'a ExecutionPlan<f64>,
    workers: usize,
    makespan_ms: f64,
    step_ms: f64,
    total_committed: u64,
    total_drafted: u64,
    total_wasted: u64,
    tokens_per_ms: f64,
    bon_assignments: u64,
    replica_wins: u64,
    reconfigurations: u64,
    sequence_digest: String,
}

fn summarize(r: &RunResult) -> RunSummary<'_> {
    let m = &r.metrics;
    RunSummary {
        seed: r.seed,
        stack: r.stack,
        batch: r.batch,
        plan: &r.plan,
        workers: worker_count(m),
        makespan_ms: m.makespan_ms,
        step_ms: m.step_ms,
        total_committed: m.total_committed,
        total_drafted: m.total_drafted,
        total_wasted: m.total_wasted,
        tokens_per_ms: throughput(m),
        bon_assignments: m.bon_assignments,
        replica_wins: m.replica_wins,
        reconfigurations: m.reconfigurations,
        sequence_digest: sequence_digest(m),
    }
}

#[derive(Serialize)]
struct EventRow {
    seed: u64,
    time_ms: f64,
    kind: String,
    worker: usize,
    request: Option<u64>,
    payload: String,
}

fn event_rows(seed: u64, m: &SimMetrics) -> Vec<EventRow> {
    m.events
        .iter()
        .map(|e| EventRow {
            seed,
            time_ms: e.time_ms,
            kind: serde_json::to_value(e.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            worker: e.worker,
            request: e.request,
            payload: e.payload.to_string(),
        })
        .collect()
}

/// Runs the scenario's stack once per seed.
pub fn cmd_simulate(scenario: &Scenario, seeds: &[u64]) -> Result<Report, ExperimentError> {
    let stack = scenario.config.stack;
    let record = Recording { sequences: true, events: LogLevel::Sched, ..Recording::default() };
    let runs: Vec<RunResult> = seeds
        .par_iter()
        .map(|&s| run_one(scenario, stack, s, None, record))
        .collect::<Result<_, _>>()?;

    let mut requests = Vec::new();
    let mut events = Vec::new();
    let mut text = format!("scenario {} / {stack}\n", scenario.config.name);
    for r in &runs {
        let m = &r.metrics;
        for q in &m.requests {
            requests.push(RequestRow {
                seed: r.seed,
                id: q.id,
                worker: q.worker,
                true_len: q.true_len,
                finish_ms: q.finish_ms,
                committed: q.committed,
                drafted: q.drafted,
                wasted: q.wasted,
                cancelled: q.cancelled,
                windows: q.windows,
                mis_speculations: q.mis_speculations,
                replicas: q.replicas,
                finished_by: &q.finished_by,
                won_by_replica: q.won_by_replica,
                final_estimate: q.final_estimate,
            });
        }
        events.extend(event_rows(r.seed, m));
        text.push_str(&format!(
            "seed {:>4}: makespan {:.1} ms, {} tokens, {:.3} tok/ms, {} workers, method `{}` w={}, {} best-of-n replicas ({} won), {} reconfigurations\n",
            r.seed,
            m.makespan_ms,
            m.total_committed,
            throughput(m),
            worker_count(m),
            r.plan.method,
            r.plan.window,
            m.bon_assignments,
            m.replica_wins,
            m.reconfigurations,
        ));
    }
    let summaries: Vec<RunSummary> = runs.iter().map(summarize).collect();
    let mut report = Report { summary: text, artifacts: Vec::new() };
    report.push_json("summary.json", &summaries)?;
    report.push_csv("requests.csv", &requests)?;
    report.push_csv("events.csv", &events)?;
    Ok(report)
}

// ---- sweep ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub batch: usize,
    pub policy: String,
    pub seed: u64,
    pub method: String,
    pub window: u32,
    pub workers: usize,
    pub makespan_ms: f64,
    pub tokens_per_ms: f64,
    pub speedup: f64,
}

/// Every (batch size, policy, seed) cell of the sweep grid. Speedup is the
/// plain-decoding makespan of the same cell divided by the policy's.
pub fn cmd_sweep(scenario: &Scenario, seeds: &[u64]) -> Result<Report, ExperimentError> {
    let spec = &scenario.config.sweep;
    let mut stacks = vec![PolicyStack::PLAIN];
    stacks.extend(spec.stacks.iter().copied().filter(|s| *s != PolicyStack::PLAIN));
    let cells: Vec<(usize, usize, u64)> = spec
        .batches
        .iter()
        .flat_map(|&b| (0..stacks.len()).flat_map(move |i| seeds.iter().map(move |&s| (b, i, s))))
        .collect();
    let runs: Vec<((usize, usize, u64), RunResult)> = cells
        .par_iter()
        .map(|&(b, i, s)| run_one(scenario, stacks[i], s, Some(b), Recording::default()).map(|r| ((b, i, s), r)))
        .collect::<Result<_, _>>()?;
    let plain: BTreeMap<(usize, u64), f64> = runs
        .iter()
        .filter(|((_, i, _), _)| *i == 0)
        .map(|&((b, _, s), ref r)| ((b, s), r.metrics.makespan_ms))
        .collect();
    let mut rows: Vec<((usize, usize, u64), SweepRow)> = runs
        .iter()
        .map(|&((b, i, s), ref r)| {
            let m = &r.metrics;
            let row = SweepRow {
                batch: b,
                policy: stacks[i].to_string(),
                seed: s,
                method: r.plan.method.clone(),
                window: r.plan.window,
                workers: worker_count(m),
                makespan_ms: m.makespan_ms,
                tokens_per_ms: throughput(m),
                speedup: plain[&(b, s)] / m.makespan_ms,
            };
            ((b, i, s), row)
        })
        .collect();
    rows.sort_by_key(|(k, _)| *k);
    let rows: Vec<SweepRow> = rows.into_iter().map(|(_, r)| r).collect();

    let mut text = format!("scenario {}: median speedup over plain decoding\n{:>6}", scenario.config.name, "batch");
    for s in &stacks[1..] {
        text.push_str(&format!(" {:>14}", s.to_string()));
    }
    text.push('\n');
    for &b in &spec.batches {
        text.push_str(&format!("{b:>6}"));
        for s in &stacks[1..] {
            let label = s.to_string();
            let mut xs: Vec<f64> =
                rows.iter().filter(|r| r.batch == b && r.policy == label).map(|r| r.speedup).collect();
            text.push_str(&format!(" {:>14.3}", median(&mut xs)));
        }
        text.push('\n');
    }
    let mut report = Report { summary: text, artifacts: Vec::new() };
    report.push_csv("sweep.csv", &rows)?;
    Ok(report)
}

// ---- compare --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub policy: String,
    pub seed: u64,
    pub method: String,
    pub window: u32,
    pub workers: usize,
    pub makespan_ms: f64,
    pub step_ms: f64,
    pub tokens_per_ms: f64,
    pub wasted: u64,
    pub bon_assignments: u64,
    pub replica_wins: u64,
    pub reconfigurations: u64,
    pub sequence_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub policy: String,
    pub median_makespan_ms: f64,
    /// Against the first policy in the list.
    pub speedup: f64,
    /// Against the previous policy in the list.
    pub incremental: f64,
}

/// Ablation over `compare` stacks: one row per (policy, seed) plus medians.
pub fn cmd_compare(scenario: &Scenario, seeds: &[u64]) -> Result<Report, ExperimentError> {
    let stacks = &scenario.config.compare;
    if stacks.is_empty() {
        return Err(ExperimentError::Config("`compare` lists no policies".into()));
    }
    let record = Recording { sequences: true, ..Recording::default() };
    let cells: Vec<(usize, u64)> =
        (0..stacks.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let runs: Vec<RunResult> = cells
        .par_iter()
        .map(|&(i, s)| run_one(scenario, stacks[i], s, None, record))
        .collect::<Result<_, _>>()?;
    let rows: Vec<CompareRow> = runs
        .iter()
        .map(|r| {
            let m = &r.metrics;
            CompareRow {
                policy: r.stack.to_string(),
                seed: r.seed,
                method: r.plan.method.clone(),
                window: r.plan.window,
                workers: worker_count(m),
                makespan_ms: m.makespan_ms,
                step_ms: m.step_ms,
                tokens_per_ms: throughput(m),
                wasted: m.total_wasted,
                bon_assignments: m.bon_assignments,
                replica_wins: m.replica_wins,
                reconfigurations: m.reconfigurations,
                sequence_digest: sequence_digest(m),
            }
        })
        .collect();
    let identical = seeds.iter().all(|&s| {
        let mut d = rows.iter().filter(|r| r.seed == s).map(|r| &r.sequence_digest);
        let first = d.next();
        d.all(|x| Some(x) == first)
    });

    let medians: Vec<f64> = stacks
        .iter()
        .map(|s| {
            let label = s.to_string();
            let mut xs: Vec<f64> = rows.iter().filter(|r| r.policy == label).map(|r| r.makespan_ms).collect();
            median(&mut xs)
        })
        .collect();
    let summary: Vec<CompareSummary> = stacks
        .iter()
        .enumerate()
        .map(|(i, s)| CompareSummary {
            policy: s.to_string(),
            median_makespan_ms: medians[i],
            speedup: medians[0] / medians[i],
            incremental: if i == 0 { 1.0 } else { medians[i - 1] / medians[i] },
        })
        .collect();

    let mut text = format!(
        "scenario {}: {} seeds\n{:<28} {:>14} {:>9} {:>11}\n",
        scenario.config.name,
        seeds.len(),
        "policy",
        "median ms",
        "speedup",
        "incremental"
    );
    for s in &summary {
        text.push_str(&format!(
            "{:<28} {:>14.1} {:>9.3} {:>11.3}\n",
            s.policy, s.median_makespan_ms, s.speedup, s.incremental
        ));
    }
    text.push_str(if identical {
        "committed sequences identical across policies\n"
    } else {
        "WARNING: committed sequences differ across policies\n"
    });
    let mut report = Report { summary: text, artifacts: Vec::new() };
    report.push_csv("compare.csv", &rows)?;
    report.push_csv("compare_summary.csv", &summary)?;
    if !identical {
        return Err(ExperimentError::Sim(crate::specsim::SimError::Invariant(
            "committed sequences differ across policies".into(),
        )));
    }
    Ok(report)
}

// ---- timeline -------------------------------------------------------------

#[derive(Serialize)]
struct SegmentRow {
    worker: usize,
    start_ms: f64,
    end_ms: f64,
    kind: String,
    rounds: u64,
}

#[derive(Serialize)]
struct WorkerRow {
    worker: usize,
    gpus: u32,
    busy_ms: f64,
    idle_ms: f64,
    idle_fraction: f64,
    rounds: u64,
    last_event_ms: f64,
    bon_host: bool,
}

#[derive(Serialize)]
struct TgsRow {
    bucket_end_ms: f64,
    tokens_per_ms: f64,
}

/// Per-worker busy segments, idle time, scheduler events and cluster
/// throughput over time for one seed.
pub fn cmd_timeline(scenario: &Scenario, seed: u64) -> Result<Report, ExperimentError> {
    let stack = scenario.config.stack;
    let record = Recording {
        sequences: false,
        outcomes: false,
        series: true,
        segments: true,
        events: LogLevel::Sched,
    };
    let r = run_one(scenario, stack, seed, None, record)?;
    let m = &r.metrics;
    let label = |k| {
        serde_json::to_value(k).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
    };
    let segments: Vec<SegmentRow> = m
        .segments
        .iter()
        .map(|s| SegmentRow {
            worker: s.worker,
            start_ms: s.start_ms,
            end_ms: s.end_ms,
            kind: label(s.kind),
            rounds: s.rounds,
        })
        .collect();
    let workers: Vec<WorkerRow> = m
        .workers
        .iter()
        .map(|w| WorkerRow {
            worker: w.id,
            gpus: w.gpus,
            busy_ms: w.busy_ms,
            idle_ms: w.idle_ms,
            idle_fraction: w.idle_fraction(),
            rounds: w.rounds,
            last_event_ms: w.last_event_ms,
            bon_host: w.bon_host,
        })
        .collect();
    let tgs: Vec<TgsRow> = m
        .tgs_buckets(scenario.config.timeline_bucket_ms)
        .into_iter()
        .map(|(bucket_end_ms, tokens_per_ms)| TgsRow { bucket_end_ms, tokens_per_ms })
        .collect();
    let mut text = format!(
        "scenario {} / {stack}, seed {seed}: makespan {:.1} ms on {} workers\n",
        scenario.config.name,
        m.makespan_ms,
        m.workers.len()
    );
    for w in &workers {
        text.push_str(&format!(
            "worker {:>3}: busy {:>10.1} ms, idle {:>5.1}%{}\n",
            w.worker,
            w.busy_ms,
            100.0 * w.idle_fraction,
            if w.bon_host { ", hosted replicas" } else { "" }
        ));
    }
    let mut report = Report { summary: text, artifacts: Vec::new() };
    report.push_csv("timeline.csv", &segments)?;
    report.push_csv("workers.csv", &workers)?;
    report.push_csv("events.csv", &event_rows(seed, m))?;
    report.push_csv("tgs.csv", &tgs)?;
    Ok(report)
}

// ---- ladder / plan --------------------------------------------------------

#[derive(Serialize)]
struct LadderRow {
    method: String,
    rate: f64,
    speedup: f64,
    window: u32,
    mode: String,
}

pub fn cmd_ladder(scenario: &Scenario) -> Result<Report, ExperimentError> {
    let batch = scenario.batch_size().max(1);
    let ladder = ladder_for(scenario, batch)?;
    let chosen = initial_select(&ladder, &scenario.historical)?;
    let mut rows = Vec::new();
    for (method, rate, speedup) in ladder.rows() {
        let i = ladder.nearest_index(rate);
        let (window, mode) = match (ladder.windows.get(&method), ladder.modes.get(&method)) {
            (Some(w), Some(m)) => (w[i], m[i].short().to_string()),
            _ => (1, String::new()),
        };
        rows.push(LadderRow { method, rate, speedup, window, mode });
    }
    let mut text = format!("draft ladder on `{}` at batch size 1\n", ladder.config);
    for m in &ladder.methods {
        let p = scenario.historical[m];
        text.push_str(&format!(
            "{m:<16} historical rate {p:.3} -> speedup {:.3}{}\n",
            ladder.speedup_at(m, p)?,
            if *m == chosen { "  (selected)" } else { "" }
        ));
    }
    let mut report = Report { summary: text, artifacts: Vec::new() };
    report.push_csv("ladder.csv", &rows)?;
    Ok(report)
}

/// Overrides for `plan`; unset fields come from the scenario.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanQuery {
    pub batch: Option<usize>,
    pub method: Option<String>,
    pub rate: Option<f64>,
}

#[derive(Serialize)]
struct PlanSummary {
    batch: usize,
    method: String,
    rate: f64,
    decoupled: ExecutionPlan<f64>,
    coupled: ExecutionPlan<f64>,
    plain: ExecutionPlan<f64>,
}

pub fn cmd_plan(scenario: &Scenario, q: &PlanQuery) -> Result<Report, ExperimentError> {
    let batch = q.batch.unwrap_or_else(|| scenario.batch_size());
    let method = q.method.clone().unwrap_or_else(|| scenario.config.default_method.clone());
    let rate = match q.rate {
        Some(p) => p,
        None => *scenario
            .historical
            .get(&method)
            .ok_or_else(|| ExperimentError::Config(format!("no acceptance rate for `{method}`")))?,
    };
    let model = &scenario.model;
    let decoupled = search_plan(batch, model, &method, rate)?;
    let coupled = search_coupled_plan(batch, model, &method, rate)?;
    let plain = plain_plan(batch, model)?;
    let table = enumerate_plans(batch, model, &method, rate)?;
    let text = format!(
        "batch {batch}, method `{method}`, p = {rate}\n\
         decoupled: verify `{}` ({} GPUs) + {} drafter GPUs, window {} (limit {}), {:.4} tok/ms per request at b = {}\n\
         coupled:   verify `{}`, window {}, {:.4} tok/ms per request\n\
         plain:     `{}`, {:.4} tok/ms per request\n",
        decoupled.config.id,
        decoupled.config.gpus,
        decoupled.draft_gpus,
        decoupled.window,
        decoupled.window_limit,
        decoupled.tgs_estimate,
        decoupled.per_worker_batch,
        coupled.config.id,
        coupled.window,
        coupled.tgs_estimate,
        plain.config.id,
        plain.tgs_estimate,
    );
    let mut report = Report { summary: text, artifacts: Vec::new() };
    report.push_json("plan.json", &PlanSummary { batch, method, rate, decoupled, coupled, plain })?;
    report.push_csv("plan_candidates.csv", &table)?;
    Ok(report)
}

// ---- fit ------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOptions {
    /// GPUs of each verification configuration.
    pub gpus: BTreeMap<String, u32>,
    /// Cluster size; defaults to the largest verifier plus the largest drafter.
    pub total_gpus: Option<u32>,
}

#[derive(Serialize)]
struct FitRow {
    key: String,
    samples: usize,
    slope: f64,
    intercept: f64,
    residual_rms: f64,
    clamped: bool,
}

enum Target {
    Draft(String, u32),
    Verify(String, u32),
    Baseline(String),
}

fn parse_key(key: &str) -> Result<Target, ExperimentError> {
    let bad = || {
        ExperimentError::Config(format!(
            "bad key `{key}`: expected draft/<method>/<gpus>, verify/<config>/<window> or baseline/<config>"
        ))
    };
    let (kind, rest) = key.split_once('/').ok_or_else(bad)?;
    let numbered = |rest: &str| -> Result<(String, u32), ExperimentError> {
        let (name, n) = rest.rsplit_once('/').ok_or_else(bad)?;
        let n: u32 = n.parse().map_err(|_| bad())?;
        if name.is_empty() || n == 0 {
            return Err(bad());
        }
        Ok((name.to_string(), n))
    };
    match kind {
        "draft" => numbered(rest).map(|(m, g)| Target::Draft(m, g)),
        "verify" => numbered(rest).map(|(c, w)| Target::Verify(c, w)),
        "baseline" if !rest.is_empty() && !rest.contains('/') => Ok(Target::Baseline(rest.to_string())),
        _ => Err(bad()),
    }
}

/// Fits one affine model per key of a `b,latency_ms,key` profile CSV and
/// assembles the cost model.
pub fn cmd_fit(csv_text: &str, opts: &FitOptions) -> Result<Report, ExperimentError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_text.as_bytes());
    let mut groups: BTreeMap<String, Vec<ProfileSample<f64>>> = BTreeMap::new();
    for rec in reader.deserialize() {
        let s: ProfileSample<f64> = rec?;
        groups.entry(s.key.clone()).or_default().push(s);
    }
    if groups.is_empty() {
        return Err(ExperimentError::Config("profile CSV has no samples".into()));
    }
    let mut model = CostModel {
        total_gpus: 0,
        verify_configs: Vec::new(),
        draft: BTreeMap::new(),
        verify: BTreeMap::new(),
        baseline: BTreeMap::new(),
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (key, samples) in &groups {
        let target = parse_key(key)?;
        let fit = match fit_affine(samples) {
            Ok(f) => f,
            Err(e) => {
                failures.push(format!("{key}: {e}"));
                continue;
            }
        };
        rows.push(FitRow {
            key: key.clone(),
            samples: samples.len(),
            slope: fit.model.slope,
            intercept: fit.model.intercept,
            residual_rms: fit.residual_rms,
            clamped: fit.clamped,
        });
        match target {
            Target::Draft(m, g) => {
                model.draft.entry(m).or_default().insert(g, fit.model);
            }
            Target::Verify(c, w) => {
                model.verify.entry(c).or_default().insert(w, fit.model);
            }
            Target::Baseline(c) => {
                model.baseline.insert(c, fit.model);
            }
        }
    }
    if !failures.is_empty() {
        return Err(ExperimentError::Config(format!("cannot fit: {}", failures.join("; "))));
    }
    for id in model.verify.keys().chain(model.baseline.keys()) {
        if model.verify_configs.iter().any(|c| &c.id == id) {
            continue;
        }
        let gpus = *opts.gpus.get(id).ok_or_else(|| {
            ExperimentError::Config(format!("no GPU count for verify config `{id}` (pass --gpus {id}=N)"))
        })?;
        model.verify_configs.push(VerifyConfig { id: id.clone(), gpus, label: String::new() });
    }
    let max_verify = model.verify_configs.iter().map(|c| c.gpus).max().unwrap_or(0);
    let max_draft = model.draft.values().flat_map(|m| m.keys().copied()).max().unwrap_or(0);
    model.total_gpus = opts.total_gpus.unwrap_or(max_verify + max_draft);
    model.validate()?;

    let worst = rows.iter().map(|r| r.residual_rms).fold(0.0, f64::max);
    let mut text = format!("fitted {} latency models; largest residual RMS {worst:.6} ms\n", rows.len());
    for r in &rows {
        text.push_str(&format!(
            "{:<28} n={:<4} slope {:>10.6} intercept {:>10.4} rms {:>9.6}{}\n",
            r.key,
            r.samples,
            r.slope,
            r.intercept,
            r.residual_rms,
            if r.clamped { " (clamped)" } else { "" }
        ));
    }
    let mut report = Report { summary: text, artifacts: Vec::new() };
    report.push("cost_model.json", model.to_json());
    report.push_csv("fit_residuals.csv", &rows)?;
    Ok(report)
}
