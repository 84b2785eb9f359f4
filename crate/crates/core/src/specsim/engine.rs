use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use serde_json::json;

use super::config::{LogLevel, Policy, SimConfig};
use super::metrics::{
    Event, EventKind, OutcomeRecord, RequestMetrics, Segment, SegmentKind, SimMetrics, TgsPoint,
    WorkerMetrics,
};
use super::tokens::{Drafter, TokenOracle};
use super::window::{verify_window, WindowState, WindowStatus};
use super::SimError;
use crate::bon::{assign_bon, scale_charge, BonCandidate, ClusterState, WorkerStatus};
use crate::costmodel::Placement;
use crate::planner::{best_window, reconfigure, window_limit};
use crate::workload::{AcceptanceEstimator, ExecMode, Request};

type ExecId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Lane {
    /// One token per request per step.
    Decode,
    /// Drafter and verifier on separate GPUs, running side by side.
    Split,
    /// Drafter and verifier take turns on the same GPUs.
    Single,
}

#[derive(Clone, Copy, Debug, Default)]
struct ExecStats {
    drafted: u64,
    /// Committed tokens that took a drafted slot (accepted or corrected).
    committed_drafted: u64,
    bonus: u64,
    wasted: u64,
    cancelled: u64,
    windows: u64,
    mis: u64,
}

/// One execution of a request: the original or a best-of-n replica.
struct Exec {
    req: Request,
    slot: usize,
    method: String,
    host: usize,
    replica: bool,
    alive: bool,
    ready_at: f64,
    draft_gpus: u32,
    windows: VecDeque<WindowState>,
    truth: TokenOracle,
    drafter: Option<Drafter>,
    since_checkpoint: u32,
    tokens: Vec<u32>,
    stats: ExecStats,
    history: Vec<(u32, f64)>,
}

impl Exec {
    fn in_flight(&self) -> u64 {
        self.windows.iter().map(|w| u64::from(w.proposed())).sum()
    }

    fn speculative_position(&self) -> u32 {
        self.req.position() + self.windows.iter().map(WindowState::proposed).sum::<u32>()
    }

    fn can_draft(&self) -> bool {
        if self.speculative_position() >= self.req.true_len {
            return false;
        }
        match self.req.mode() {
            ExecMode::Decoupled => self.windows.len() < 2,
            ExecMode::Coupled => self.windows.is_empty(),
        }
    }
}

struct Round {
    start: f64,
    end: f64,
    participants: Vec<ExecId>,
    verify: Vec<ExecId>,
    decode: u32,
}

struct Worker {
    lane: Lane,
    gpus: u32,
    execs: BTreeSet<ExecId>,
    round: Option<Round>,
    gen: u64,
    busy: f64,
    rounds: u64,
    last_event: f64,
    had_work: bool,
    bon_host: bool,
    last_segment: Option<usize>,
}

/// Queue entry; `gen` must match the worker's current generation.
struct Wake {
    time: f64,
    worker: usize,
    seq: u64,
    gen: u64,
}

impl PartialEq for Wake {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Wake {}

impl PartialOrd for Wake {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Wake {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.worker.cmp(&other.worker))
            .then(self.seq.cmp(&other.seq))
    }
}

/// Runs one rollout step and returns its metrics.
///
/// The config is validated first; nothing is simulated if a plan or model
/// entry is missing.
pub fn simulate(cfg: &SimConfig) -> Result<SimMetrics, SimError> {
    cfg.validate()?;
    let mut engine = Engine::new(cfg)?;
    engine.run()?;
    Ok(engine.into_metrics())
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    execs: Vec<Exec>,
    workers: Vec<Worker>,
    queue: BinaryHeap<Reverse<Wake>>,
    seq: u64,
    slots: BTreeMap<u64, usize>,
    by_request: Vec<Vec<ExecId>>,
    home: Vec<usize>,
    finish: Vec<Option<(f64, ExecId)>>,
    cluster: Option<ClusterState>,
    replica_windows: BTreeMap<String, u32>,
    /// Speculation mode of the policy; replicas run in it too.
    mode: ExecMode,
    m: SimMetrics,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig) -> Result<Self, SimError> {
        let plan = &cfg.plan;
        let batch = cfg.trace.len();
        let worker_gpus = plan.worker_gpus();
        let fit = (cfg.model.total_gpus / worker_gpus) as usize;
        let n_workers = if batch == 0 {
            0
        } else {
            batch.div_ceil(plan.per_worker_batch.max(1)).min(fit).max(1)
        };
        let per_worker = if n_workers == 0 { 0 } else { batch.div_ceil(n_workers) };
        let (lane, mode) = match cfg.stack.policy {
            Policy::PlainDecode => (Lane::Decode, ExecMode::Coupled),
            Policy::CoupledSpec => (Lane::Single, ExecMode::Coupled),
            Policy::Disaggregated => (Lane::Split, ExecMode::Coupled),
            Policy::DecoupledSpec => (Lane::Split, ExecMode::Decoupled),
        };
        let speculative = cfg.stack.is_speculative();
        let method = if speculative { plan.method.clone() } else { String::new() };
        let prior = cfg.historical.get(&method).copied().unwrap_or(0.5);

        let mut workers: Vec<Worker> = (0..n_workers)
            .map(|_| Worker {
                lane,
                gpus: worker_gpus,
                execs: BTreeSet::new(),
                round: None,
                gen: 0,
                busy: 0.0,
                rounds: 0,
                last_event: 0.0,
                had_work: false,
                bon_host: false,
                last_segment: None,
            })
            .collect();
        let mut execs = Vec::with_capacity(batch);
        let mut slots = BTreeMap::new();
        for (slot, r) in cfg.trace.iter().enumerate() {
            let host = slot / per_worker;
            let mut req = r.clone();
            req.reset_live(mode, plan.window, AcceptanceEstimator::new(cfg.estimator_window, prior)?);
            let drafter = if speculative {
                let p = r.accept_prob(&method).unwrap_or(0.0);
                Some(Drafter::new(cfg.seed, r.id, &method, p))
            } else {
                None
            };
            execs.push(Exec {
                truth: TokenOracle::new(cfg.seed, r.id),
                req,
                slot,
                method: method.clone(),
                host,
                replica: false,
                alive: true,
                ready_at: 0.0,
                draft_gpus: plan.draft_gpus.max(1),
                windows: VecDeque::new(),
                drafter,
                since_checkpoint: 0,
                tokens: Vec::new(),
                stats: ExecStats::default(),
                history: Vec::new(),
            });
            workers[host].execs.insert(slot);
            workers[host].had_work = true;
            slots.insert(r.id, slot);
        }
        let cluster = cfg.stack.bon.then(|| {
            let mut c = ClusterState::new(cfg.b_max);
            for w in 0..n_workers {
                c.add_worker(w, WorkerStatus::Busy, cfg.b_max);
                c.join(w, &method);
                c.set_load(w, cfg.b_max);
            }
            c
        });
        Ok(Self {
            cfg,
            by_request: (0..batch).map(|s| vec![s]).collect(),
            home: execs.iter().map(|e| e.host).collect(),
            finish: vec![None; batch],
            execs,
            workers,
            queue: BinaryHeap::new(),
            seq: 0,
            slots,
            cluster,
            replica_windows: BTreeMap::new(),
            mode,
            m: SimMetrics::default(),
        })
    }

    fn schedule(&mut self, w: usize, time: f64) {
        let worker = &mut self.workers[w];
        worker.gen += 1;
        self.seq += 1;
        self.queue.push(Reverse(Wake { time, worker: w, seq: self.seq, gen: worker.gen }));
    }

    fn log(&mut self, level: LogLevel, time: f64, kind: EventKind, worker: usize, request: Option<u64>, payload: serde_json::Value) {
        if self.cfg.record.events >= level {
            self.m.events.push(Event { time_ms: time, kind, worker, request, payload });
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        for w in 0..self.workers.len() {
            self.schedule(w, 0.0);
        }
        while let Some(Reverse(wake)) = self.queue.pop() {
            if wake.gen != self.workers[wake.worker].gen {
                continue;
            }
            self.handle(wake.worker, wake.time)?;
        }
        if let Some(slot) = self.finish.iter().position(Option::is_none) {
            return Err(SimError::Invariant(format!(
                "request {} never finished",
                self.cfg.trace[slot].id
            )));
        }
        Ok(())
    }

    fn handle(&mut self, w: usize, now: f64) -> Result<(), SimError> {
        if let Some(end) = self.workers[w].round.as_ref().map(|r| r.end) {
            if end > now {
                self.schedule(w, end);
                return Ok(());
            }
            self.finish_round(w)?;
        }
        if self.workers[w].execs.is_empty() {
            if self.workers[w].had_work {
                self.workers[w].had_work = false;
                self.on_drain(w, now)?;
            }
            return Ok(());
        }
        self.start_round(w, now)
    }

    // ---- rounds ---------------------------------------------------------

    fn start_round(&mut self, w: usize, now: f64) -> Result<(), SimError> {
        let ready: Vec<ExecId> = self.workers[w]
            .execs
            .iter()
            .copied()
            .filter(|&e| self.execs[e].ready_at <= now)
            .collect();
        if ready.is_empty() {
            let next = self.workers[w]
                .execs
                .iter()
                .map(|&e| self.execs[e].ready_at)
                .fold(f64::INFINITY, f64::min);
            self.schedule(w, next);
            return Ok(());
        }
        let lane = self.workers[w].lane;
        let (duration, participants, verify, decode) = match lane {
            Lane::Decode => {
                let k = ready.iter().map(|&e| self.execs[e].req.remaining()).min().unwrap_or(1);
                let ms = f64::from(k) * self.cfg.baseline_latency(ready.len())?;
                (ms, ready, Vec::new(), k)
            }
            Lane::Split => {
                let verify: Vec<ExecId> = ready
                    .iter()
                    .copied()
                    .filter(|&e| {
                        self.execs[e]
                            .windows
                            .front()
                            .is_some_and(|win| win.status == WindowStatus::AwaitingVerify)
                    })
                    .collect();
                let drafting: Vec<ExecId> =
                    ready.iter().copied().filter(|&e| self.execs[e].can_draft()).collect();
                for &e in &drafting {
                    self.draft(e, w, now);
                }
                let ms = self.draft_cost(&drafting)?.max(self.verify_cost(&verify, ready.len())?);
                let participants: BTreeSet<ExecId> = verify.iter().chain(&drafting).copied().collect();
                (ms, participants.into_iter().collect(), verify, 0)
            }
            Lane::Single => {
                for &e in &ready {
                    self.draft(e, w, now);
                }
                let ms = self.draft_cost(&ready)? + self.verify_cost(&ready, ready.len())?;
                (ms, ready.clone(), ready, 0)
            }
        };
        if !duration.is_finite() || duration < 0.0 {
            return Err(SimError::Config(format!("round latency {duration} on worker {w}")));
        }
        let end = now + duration;
        self.workers[w].round = Some(Round { start: now, end, participants, verify, decode });
        self.schedule(w, end);
        Ok(())
    }

    fn draft(&mut self, e: ExecId, w: usize, now: f64) {
        let ex = &mut self.execs[e];
        let start = ex.speculative_position();
        let size = ex.req.window().min(ex.req.true_len - start);
        let drafter = ex.drafter.as_mut().expect("speculative execution has a drafter");
        let tokens: Vec<u32> = (start..start + size)
            .map(|i| {
                let t = ex.truth.token(i);
                drafter.propose(i, t)
            })
            .collect();
        ex.stats.drafted += u64::from(size);
        ex.windows.push_back(WindowState {
            request: ex.req.id,
            start,
            nominal: ex.req.window(),
            mode: ex.req.mode(),
            tokens,
            status: WindowStatus::Drafting,
        });
        let (id, window) = (ex.req.id, ex.req.window());
        self.log(
            LogLevel::Full,
            now,
            EventKind::Draft,
            w,
            Some(id),
            json!({"start": start, "proposed": size, "window": window}),
        );
    }

    /// Token-by-token draft passes: pass `j` runs every window longer than `j`.
    fn draft_cost(&self, drafting: &[ExecId]) -> Result<f64, SimError> {
        let mut groups: BTreeMap<(&str, u32), Vec<u32>> = BTreeMap::new();
        for &e in drafting {
            let ex = &self.execs[e];
            let size = ex.windows.back().map_or(0, WindowState::proposed);
            groups.entry((ex.method.as_str(), ex.draft_gpus)).or_default().push(size);
        }
        let mut total = 0.0;
        for ((method, gpus), sizes) in groups {
            let longest = sizes.iter().copied().max().unwrap_or(0);
            for j in 0..longest {
                let b = sizes.iter().filter(|&&s| s > j).count();
                total += self.cfg.model.draft_latency(method, gpus, b)?;
            }
        }
        Ok(total)
    }

    /// One verification pass over the front windows, priced at the largest
    /// drafting window among them and the worker's live batch.
    fn verify_cost(&self, verify: &[ExecId], live: usize) -> Result<f64, SimError> {
        if verify.is_empty() {
            return Ok(0.0);
        }
        let w = verify
            .iter()
            .filter_map(|&e| self.execs[e].windows.front().map(|win| win.nominal))
            .max()
            .unwrap_or(1);
        Ok(self.cfg.model.verify_latency(&self.cfg.plan.config.id, w, live)?)
    }

    fn finish_round(&mut self, w: usize) -> Result<(), SimError> {
        let round = self.workers[w].round.take().expect("round in progress");
        let now = round.end;
        let lane = self.workers[w].lane;
        {
            let worker = &mut self.workers[w];
            worker.busy += now - round.start;
            worker.rounds += 1;
            worker.last_event = now;
        }
        self.add_segment(w, round.start, now, 1);

        let mut progressed: Vec<(ExecId, u32)> = Vec::with_capacity(round.participants.len());
        match lane {
            Lane::Decode => {
                for &e in &round.participants {
                    if self.execs[e].alive {
                        self.decode(e, w, round.decode, now);
                        progressed.push((e, round.decode));
                    }
                }
            }
            Lane::Split | Lane::Single => {
                for &e in &round.verify {
                    if self.execs[e].alive {
                        let n = self.verify_front(e, w, lane, now)?;
                        progressed.push((e, n));
                    }
                }
                for &e in &round.participants {
                    for win in self.execs[e].windows.iter_mut() {
                        if win.status == WindowStatus::Drafting {
                            win.status = WindowStatus::AwaitingVerify;
                        }
                    }
                }
            }
        }
        if self.cfg.record.series {
            let tokens = progressed.iter().map(|&(_, n)| n).sum();
            self.m.series.push(TgsPoint { worker: w, end_ms: now, duration_ms: now - round.start, tokens });
        }
        if self.cfg.check_invariants {
            self.audit(&round.participants, lane)?;
        }
        for (e, n) in progressed {
            if !self.execs[e].alive {
                continue;
            }
            if self.execs[e].req.is_finished() {
                self.on_finish(e, now)?;
            } else {
                self.step_schedulers(e, n, now)?;
            }
        }
        Ok(())
    }

    fn decode(&mut self, e: ExecId, w: usize, k: u32, now: f64) {
        let record = self.cfg.record.sequences;
        let ex = &mut self.execs[e];
        let start = ex.req.position();
        if record {
            for i in start..start + k {
                let t = ex.truth.token(i);
                ex.tokens.push(t);
            }
        }
        ex.req.commit(k);
        let (id, pos) = (ex.req.id, ex.req.position());
        self.log(LogLevel::Full, now, EventKind::Commit, w, Some(id), json!({"tokens": k, "position": pos}));
    }

    fn verify_front(&mut self, e: ExecId, w: usize, lane: Lane, now: f64) -> Result<u32, SimError> {
        let bonus = self.cfg.bonus_token;
        let record = self.cfg.record;
        let ex = &mut self.execs[e];
        let front = ex.windows.pop_front().expect("window to verify");
        let out = verify_window(&front, ex.windows.front(), &mut ex.truth, ex.req.true_len, bonus);
        let a = out.accepted;
        if record.sequences {
            ex.tokens.extend_from_slice(&front.tokens[..a as usize]);
            for i in a..out.committed {
                let t = ex.truth.token(front.start + i);
                ex.tokens.push(t);
            }
        }
        ex.req.commit(out.committed);
        let size = front.proposed();
        ex.stats.committed_drafted += u64::from(a + u32::from(out.corrected_token_emitted));
        ex.stats.bonus += u64::from(out.bonus_token_emitted);
        ex.stats.wasted += u64::from(out.wasted);
        ex.stats.windows += 1;
        ex.stats.mis += u64::from(out.corrected_token_emitted);
        if out.successor_discarded {
            ex.windows.clear();
        }
        ex.req.estimator_mut().record((a + 1).min(size), a)?;
        let (id, replica, position) = (ex.req.id, ex.replica, ex.req.position());

        if lane == Lane::Split && front.mode == ExecMode::Decoupled {
            let iterations = if out.corrected_token_emitted { 2 } else { 1 };
            let y = &mut self.m.window_yield;
            y.windows += 1;
            y.yield_sum += f64::from(out.committed) / iterations as f64;
            y.committed += u64::from(out.committed);
            y.iterations += iterations;
        }
        let count = self.m.outcome_counts.entry((front.mode, out.window)).or_default();
        count.0 += 1;
        count.1 += u64::from(out.corrected_token_emitted);
        if record.outcomes {
            self.m.outcomes.push(OutcomeRecord {
                request: id,
                worker: w,
                replica,
                mode: front.mode,
                window: out.window,
                proposed: size,
                accepted: a,
                committed: out.committed,
                wasted: out.wasted,
            });
        }
        if record.events >= LogLevel::Full {
            self.log(LogLevel::Full, now, EventKind::Verify, w, Some(id), json!({"start": front.start, "proposed": size, "accepted": a}));
            self.log(LogLevel::Full, now, EventKind::Commit, w, Some(id), json!({"tokens": out.committed, "position": position}));
            if out.wasted > 0 || out.successor_discarded {
                self.log(
                    LogLevel::Full,
                    now,
                    EventKind::Rollback,
                    w,
                    Some(id),
                    json!({"wasted": out.wasted, "successor_discarded": out.successor_discarded}),
                );
            }
        }
        Ok(out.committed)
    }

    fn add_segment(&mut self, w: usize, start: f64, end: f64, rounds: u64) {
        if !self.cfg.record.segments {
            return;
        }
        let worker = &self.workers[w];
        let kind = match (worker.lane, worker.bon_host) {
            (Lane::Decode, _) => SegmentKind::Decode,
            (_, true) => SegmentKind::Replica,
            _ => SegmentKind::Speculate,
        };
        if let Some(i) = worker.last_segment {
            let seg = &mut self.m.segments[i];
            if seg.kind == kind && seg.end_ms == start {
                seg.end_ms = end;
                seg.rounds += rounds;
                return;
            }
        }
        self.m.segments.push(Segment { worker: w, start_ms: start, end_ms: end, kind, rounds });
        self.workers[w].last_segment = Some(self.m.segments.len() - 1);
    }

    fn audit(&self, participants: &[ExecId], lane: Lane) -> Result<(), SimError> {
        for &e in participants {
            let ex = &self.execs[e];
            let id = ex.req.id;
            let n = ex.windows.len();
            let depth_ok = match lane {
                Lane::Single | Lane::Decode => n == 0,
                Lane::Split => n <= 1 || (n == 2 && ex.windows[1].mode == ExecMode::Decoupled),
            };
            if !depth_ok {
                return Err(SimError::Invariant(format!("request {id}: {n} windows in flight")));
            }
            if ex.windows.iter().any(|win| win.proposed() > win.nominal) {
                return Err(SimError::Invariant(format!("request {id}: window longer than its nominal size")));
            }
            let s = ex.stats;
            if s.drafted != s.committed_drafted + s.wasted + s.cancelled + ex.in_flight() {
                return Err(SimError::Invariant(format!(
                    "request {id}: drafted {} != committed {} + wasted {} + cancelled {} + in flight {}",
                    s.drafted,
                    s.committed_drafted,
                    s.wasted,
                    s.cancelled,
                    ex.in_flight()
                )));
            }
            if ex.alive && ex.speculative_position() > ex.req.true_len {
                return Err(SimError::Invariant(format!("request {id}: drafted past its end")));
            }
        }
        Ok(())
    }

    // ---- schedulers -----------------------------------------------------

    /// Progress trigger: records an acceptance checkpoint every
    /// `reconfig_interval` committed tokens and, when enabled, re-plans the
    /// request's window and mode.
    fn step_schedulers(&mut self, e: ExecId, committed: u32, now: f64) -> Result<(), SimError> {
        let interval = self.cfg.reconfig_interval;
        let ex = &mut self.execs[e];
        ex.since_checkpoint += committed;
        if ex.since_checkpoint < interval {
            return Ok(());
        }
        ex.since_checkpoint %= interval;
        let estimate = ex.req.estimator().estimate();
        ex.history.push((ex.req.position(), estimate));
        if !self.cfg.stack.reconfig || ex.replica || ex.req.estimator().is_empty() {
            return Ok(());
        }
        let plan = &self.cfg.plan;
        let threshold = self.cfg.historical.get(&ex.method).copied().unwrap_or(0.0);
        let from = (ex.req.mode(), ex.req.window());
        let to = if estimate < threshold {
            reconfigure(plan, &[&ex.req], &self.cfg.model)?
                .first()
                .map_or(from, |rp| (rp.mode, rp.window))
        } else {
            (ExecMode::Decoupled, plan.window)
        };
        if to == from {
            return Ok(());
        }
        ex.req.reconfigure(to.0, to.1);
        let (id, host) = (ex.req.id, ex.host);
        self.m.reconfigurations += 1;
        self.log(
            LogLevel::Sched,
            now,
            EventKind::Reconfig,
            host,
            Some(id),
            json!({
                "estimate": estimate,
                "threshold": threshold,
                "from_mode": from.0.short(),
                "from_window": from.1,
                "to_mode": to.0.short(),
                "to_window": to.1,
            }),
        );
        Ok(())
    }

    fn on_finish(&mut self, e: ExecId, now: f64) -> Result<(), SimError> {
        let slot = self.execs[e].slot;
        self.finish[slot] = Some((now, e));
        self.retire(e);
        let others: Vec<ExecId> =
            self.by_request[slot].iter().copied().filter(|&o| o != e && self.execs[o].alive).collect();
        for o in others {
            self.cancel(o, now);
        }
        let ex = &self.execs[e];
        if ex.replica {
            self.m.replica_wins += 1;
        }
        let (id, host, payload) =
            (ex.req.id, ex.host, json!({"method": ex.method, "replica": ex.replica}));
        self.log(LogLevel::Sched, now, EventKind::Finish, host, Some(id), payload);
        Ok(())
    }

    /// Removes a live execution from its host and frees its verify slot.
    fn retire(&mut self, e: ExecId) {
        let ex = &mut self.execs[e];
        ex.alive = false;
        let host = ex.host;
        self.workers[host].execs.remove(&e);
        if self.workers[host].bon_host {
            if let Some(c) = self.cluster.as_mut() {
                c.set_load(host, c.load(host).saturating_sub(1));
            }
        }
    }

    fn cancel(&mut self, e: ExecId, now: f64) {
        let ex = &mut self.execs[e];
        ex.stats.cancelled += ex.in_flight();
        ex.windows.clear();
        let host = ex.host;
        self.retire(e);
        let abort = match &self.workers[host].round {
            Some(r) => r.participants.iter().all(|&p| !self.execs[p].alive),
            None => true,
        };
        if !abort {
            return;
        }
        if let Some(r) = self.workers[host].round.take() {
            let worker = &mut self.workers[host];
            worker.busy += now - r.start;
            worker.last_event = now;
            self.add_segment(host, r.start, now, 0);
        }
        self.schedule(host, now);
    }

    /// Drain trigger: hands the worker to the best-of-n scheduler.
    fn on_drain(&mut self, w: usize, now: f64) -> Result<(), SimError> {
        let Some(cluster) = self.cluster.as_mut() else {
            return Ok(());
        };
        cluster.release(w);
        let mut candidates = Vec::new();
        for (slot, execs) in self.by_request.iter().enumerate() {
            if self.finish[slot].is_some() {
                continue;
            }
            let live: Vec<&Exec> = execs.iter().map(|&e| &self.execs[e]).filter(|x| x.alive).collect();
            let Some(first) = live.iter().find(|x| !x.replica).or(live.first()) else {
                continue;
            };
            candidates.push(BonCandidate {
                request: first.req.id,
                rate: first.req.estimator().estimate(),
                held: live.iter().map(|x| x.method.clone()).collect(),
            });
        }
        let cluster = self.cluster.as_mut().expect("cluster present");
        let assignment = assign_bon(&candidates, &self.cfg.methods, &[w], cluster, self.cfg.bon_policy);
        for ((request, method), host) in assignment {
            self.spawn_replica(request, &method, host, now)?;
        }
        Ok(())
    }

    fn replica_window(&mut self, method: &str) -> Result<u32, SimError> {
        if let Some(&w) = self.replica_windows.get(method) {
            return Ok(w);
        }
        let config = &self.cfg.plan.config.id;
        let at = Placement { method, draft_gpus: 1, config };
        let p = self.cfg.historical.get(method).copied().unwrap_or(0.5);
        let limit = match self.mode {
            ExecMode::Coupled => self.cfg.model.max_window(config),
            ExecMode::Decoupled => window_limit(&self.cfg.model, at)?,
        };
        let (w, _) = best_window(&self.cfg.model, at, limit, p, self.mode)?;
        self.replica_windows.insert(method.to_string(), w);
        Ok(w)
    }

    fn spawn_replica(&mut self, request: u64, method: &str, host: usize, now: f64) -> Result<(), SimError> {
        let slot = self.slots[&request];
        let lead = self.by_request[slot]
            .iter()
            .copied()
            .filter(|&e| self.execs[e].alive)
            .max_by(|&a, &b| {
                self.execs[a].req.position().cmp(&self.execs[b].req.position()).then(b.cmp(&a))
            })
            .expect("candidate has a live execution");
        let window = self.replica_window(method)?;
        let prior = self.cfg.historical.get(method).copied().unwrap_or(0.5);
        let estimator = AcceptanceEstimator::new(self.cfg.estimator_window, prior)?;
        let lead_ex = &self.execs[lead];
        let position = lead_ex.req.position();
        let req = lead_ex.req.fork_at(position, self.mode, window, estimator);
        let p = req.accept_prob(method).unwrap_or(0.0);
        let ready_at = now + scale_charge(position, &self.cfg.scale);
        let tokens = if self.cfg.record.sequences { lead_ex.tokens.clone() } else { Vec::new() };
        let id = self.execs.len();
        self.execs.push(Exec {
            truth: TokenOracle::new(self.cfg.seed, request),
            drafter: Some(Drafter::new(self.cfg.seed, request, method, p)),
            req,
            slot,
            method: method.to_string(),
            host,
            replica: true,
            alive: true,
            ready_at,
            draft_gpus: 1,
            windows: VecDeque::new(),
            since_checkpoint: 0,
            tokens,
            stats: ExecStats::default(),
            history: Vec::new(),
        });
        self.by_request[slot].push(id);
        let worker = &mut self.workers[host];
        worker.execs.insert(id);
        worker.bon_host = true;
        worker.had_work = true;
        if worker.round.is_none() {
            self.schedule(host, now);
        }
        self.m.bon_assignments += 1;
        self.log(
            LogLevel::Sched,
            now,
            EventKind::BonAssign,
            host,
            Some(request),
            json!({"method": method, "position": position, "ready_ms": ready_at, "window": window}),
        );
        Ok(())
    }

    // ---- results --------------------------------------------------------

    fn into_metrics(mut self) -> SimMetrics {
        let makespan = self.workers.iter().map(|w| w.last_event).fold(0.0, f64::max);
        let mut requests = Vec::with_capacity(self.cfg.trace.len());
        for (slot, r) in self.cfg.trace.iter().enumerate() {
            let (finish_ms, winner) = self.finish[slot].expect("all requests finished");
            let mut sum = ExecStats::default();
            for &e in &self.by_request[slot] {
                let s = self.execs[e].stats;
                sum.drafted += s.drafted;
                sum.wasted += s.wasted;
                sum.cancelled += s.cancelled;
                sum.bonus += s.bonus;
                sum.windows += s.windows;
                sum.mis += s.mis;
            }
            if self.cfg.record.sequences {
                self.m.sequences.insert(r.id, std::mem::take(&mut self.execs[winner].tokens));
            }
            let original = &self.execs[slot];
            requests.push(RequestMetrics {
                id: r.id,
                worker: self.home[slot],
                true_len: r.true_len,
                finish_ms,
                committed: self.execs[winner].req.position(),
                drafted: sum.drafted,
                wasted: sum.wasted,
                cancelled: sum.cancelled,
                bonus: sum.bonus,
                windows: sum.windows,
                mis_speculations: sum.mis,
                replicas: (self.by_request[slot].len() - 1) as u32,
                finished_by: self.execs[winner].method.clone(),
                won_by_replica: self.execs[winner].replica,
                final_estimate: original.req.estimator().estimate(),
                acceptance_history: original.history.clone(),
            });
        }
        let workers = self
            .workers
            .iter()
            .enumerate()
            .map(|(id, w)| WorkerMetrics {
                id,
                gpus: w.gpus,
                busy_ms: w.busy,
                idle_ms: (makespan - w.busy).max(0.0),
                rounds: w.rounds,
                last_event_ms: w.last_event,
                bon_host: w.bon_host,
            })
            .collect();
        let total_committed: u64 = requests.iter().map(|r| u64::from(r.committed)).sum();
        self.m.total_drafted = requests.iter().map(|r| r.drafted).sum();
        self.m.total_wasted = requests.iter().map(|r| r.wasted).sum();
        self.m.total_committed = total_committed;
        self.m.makespan_ms = makespan;
        self.m.step_ms = makespan + self.cfg.prepare_learn_ms;
        self.m.mean_tgs = if makespan > 0.0 { total_committed as f64 / makespan } else { 0.0 };
        self.m.requests = requests;
        self.m.workers = workers;
        self.m
    }
}
