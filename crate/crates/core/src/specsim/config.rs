use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::bon::{BonPolicy, ScaleCost, DEFAULT_B_MAX};
use crate::costmodel::CostModel;
use crate::planner::{ExecutionPlan, PlanKind};
use crate::workload::{Request, DEFAULT_ESTIMATOR_WINDOW};

/// Tokens committed by a request between two reconfiguration checks.
pub const DEFAULT_RECONFIG_INTERVAL: u32 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Autoregressive decoding, one token per request per step.
    PlainDecode,
    /// Drafter and verifier share the worker; each window is drafted then
    /// verified back to back.
    CoupledSpec,
    /// Drafter and verifier on separate GPUs but with coupled window
    /// semantics, so each lane waits for the other.
    Disaggregated,
    /// Drafter and verifier on separate GPUs, pipelined one window ahead.
    DecoupledSpec,
}

/// A base policy plus the online schedulers layered on top of it.
///
/// With `reconfig` on, the experiment driver also picks the initial drafting
/// method from the draft ladder instead of using the scenario default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PolicyStack {
    pub policy: Policy,
    pub reconfig: bool,
    pub bon: bool,
}

impl TryFrom<String> for PolicyStack {
    type Error = SimError;

    fn try_from(s: String) -> Result<Self, SimError> {
        s.parse()
    }
}

impl From<PolicyStack> for String {
    fn from(s: PolicyStack) -> String {
        s.to_string()
    }
}

impl PolicyStack {
    pub const PLAIN: Self = Self::base(Policy::PlainDecode);
    pub const COUPLED: Self = Self::base(Policy::CoupledSpec);
    pub const DISAGGREGATED: Self = Self::base(Policy::Disaggregated);
    pub const DECOUPLED: Self = Self::base(Policy::DecoupledSpec);
    pub const RECONFIG: Self = Self { policy: Policy::DecoupledSpec, reconfig: true, bon: false };
    pub const FULL: Self = Self { policy: Policy::DecoupledSpec, reconfig: true, bon: true };

    /// The ablation ladder, from the baseline to the full stack.
    pub const ABLATION: [Self; 6] = [
        Self::PLAIN,
        Self::DISAGGREGATED,
        Self::COUPLED,
        Self::DECOUPLED,
        Self::RECONFIG,
        Self::FULL,
    ];

    pub const fn base(policy: Policy) -> Self {
        Self { policy, reconfig: false, bon: false }
    }

    pub fn is_speculative(&self) -> bool {
        self.policy != Policy::PlainDecode
    }

    pub fn plan_kind(&self) -> PlanKind {
        match self.policy {
            Policy::PlainDecode => PlanKind::Plain,
            Policy::CoupledSpec => PlanKind::Coupled,
            Policy::Disaggregated | Policy::DecoupledSpec => PlanKind::Decoupled,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.bon && !self.is_speculative() {
            return Err(SimError::Config("best-of-n needs a speculative policy".into()));
        }
        if self.reconfig && self.policy != Policy::DecoupledSpec {
            return Err(SimError::Config(
                "request reconfiguration needs the decoupled policy".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for PolicyStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.policy {
            Policy::PlainDecode => "plain",
            Policy::CoupledSpec => "coupled",
            Policy::Disaggregated => "disaggregated",
            Policy::DecoupledSpec => "decoupled",
        };
        f.write_str(base)?;
        if self.reconfig {
            f.write_str("+reconfig")?;
        }
        if self.bon {
            f.write_str("+bon")?;
        }
        Ok(())
    }
}

impl FromStr for PolicyStack {
    type Err = SimError;

    /// Parses labels such as `decoupled+reconfig+bon`.
    fn from_str(s: &str) -> Result<Self, SimError> {
        let mut parts = s.split('+').map(str::trim);
        let policy = match parts.next().unwrap_or_default() {
            "plain" => Policy::PlainDecode,
            "coupled" => Policy::CoupledSpec,
            "disaggregated" => Policy::Disaggregated,
            "decoupled" => Policy::DecoupledSpec,
            other => return Err(SimError::Config(format!("unknown policy `{other}`"))),
        };
        let mut stack = Self::base(policy);
        for flag in parts {
            match flag {
                "reconfig" => stack.reconfig = true,
                "bon" => stack.bon = true,
                other => return Err(SimError::Config(format!("unknown policy flag `{other}`"))),
            }
        }
        stack.validate()?;
        Ok(stack)
    }
}

/// How much of the event stream to keep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    #[default]
    Off,
    /// Finish, reconfiguration and best-of-n records only.
    Sched,
    /// Every draft, verify, commit and rollback as well.
    Full,
}

/// Optional outputs. Everything is off by default so sweeps stay cheap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Recording {
    /// Committed token sequence of every request.
    pub sequences: bool,
    /// One record per verified window.
    pub outcomes: bool,
    /// Tokens committed per worker round.
    pub series: bool,
    /// Merged busy intervals per worker.
    pub segments: bool,
    pub events: LogLevel,
}

/// Everything one simulated rollout step needs.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub trace: Vec<Request>,
    pub model: CostModel<f64>,
    pub stack: PolicyStack,
    pub plan: ExecutionPlan<f64>,
    /// Drafting methods available to best-of-n replicas.
    pub methods: Vec<String>,
    /// Acceptance rate per method from earlier steps. Seeds the estimators
    /// and is the threshold below which a request gets reconfigured.
    pub historical: BTreeMap<String, f64>,
    pub bonus_token: bool,
    pub seed: u64,
    pub prepare_learn_ms: f64,
    pub b_max: usize,
    pub bon_policy: BonPolicy,
    pub scale: ScaleCost<f64>,
    pub reconfig_interval: u32,
    pub estimator_window: usize,
    pub record: Recording,
    /// Audit window discipline and token conservation after every round.
    pub check_invariants: bool,
}

/// Method ids present in any request of the trace, sorted.
pub fn trace_methods(trace: &[Request]) -> Vec<String> {
    let set: BTreeSet<&String> = trace.iter().flat_map(|r| r.latent_accept.keys()).collect();
    set.into_iter().cloned().collect()
}

/// Mean latent acceptance per method over the trace.
pub fn trace_means(trace: &[Request]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in trace {
        for (m, p) in &r.latent_accept {
            let e = sums.entry(m.clone()).or_default();
            e.0 += p;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect()
}

impl SimConfig {
    /// Config with default knobs. Best-of-n methods default to every method in
    /// the trace and historical rates to the trace means.
    pub fn new(
        trace: Vec<Request>,
        model: CostModel<f64>,
        stack: PolicyStack,
        plan: ExecutionPlan<f64>,
    ) -> Self {
        let methods = trace_methods(&trace);
        let historical = trace_means(&trace);
        Self {
            trace,
            model,
            stack,
            plan,
            methods,
            historical,
            bonus_token: false,
            seed: 0,
            prepare_learn_ms: 0.0,
            b_max: DEFAULT_B_MAX,
            bon_policy: BonPolicy::Greedy,
            scale: ScaleCost::free(),
            reconfig_interval: DEFAULT_RECONFIG_INTERVAL,
            estimator_window: DEFAULT_ESTIMATOR_WINDOW,
            record: Recording::default(),
            check_invariants: false,
        }
    }

    fn historical_rate(&self, method: &str) -> Result<f64, SimError> {
        self.historical
            .get(method)
            .copied()
            .ok_or_else(|| SimError::Config(format!("no historical acceptance rate for `{method}`")))
    }

    /// Checks the config before any simulated time passes.
    pub fn validate(&self) -> Result<(), SimError> {
        self.stack.validate()?;
        self.model.validate()?;
        let plan = &self.plan;
        if plan.kind != self.stack.plan_kind() {
            return Err(SimError::Config(format!(
                "policy `{}` needs a {:?} plan, got {:?}",
                self.stack,
                self.stack.plan_kind(),
                plan.kind
            )));
        }
        if self.model.config(&plan.config.id)?.gpus != plan.config.gpus {
            return Err(SimError::Config(format!(
                "plan GPU count for `{}` disagrees with the cost model",
                plan.config.id
            )));
        }
        if plan.worker_gpus() > self.model.total_gpus {
            return Err(SimError::Config(format!(
                "a worker needs {} GPUs but the cluster has {}",
                plan.worker_gpus(),
                self.model.total_gpus
            )));
        }
        let positive = |what: &str, x: f64| {
            if x.is_finite() && x >= 0.0 {
                Ok(())
            } else {
                Err(SimError::Config(format!("{what} must be finite and nonnegative")))
            }
        };
        positive("prepare_learn_ms", self.prepare_learn_ms)?;
        positive("scale.model_scale_ms", self.scale.model_scale_ms)?;
        self.scale.kv_scale.validate("scale.kv_scale")?;
        if self.b_max == 0 {
            return Err(SimError::Config("b_max must be at least 1".into()));
        }
        if self.reconfig_interval == 0 {
            return Err(SimError::Config("reconfig_interval must be at least 1".into()));
        }
        if self.estimator_window == 0 {
            return Err(SimError::Config("estimator_window must be at least 1".into()));
        }
        let mut ids = BTreeSet::new();
        for r in &self.trace {
            if !ids.insert(r.id) {
                return Err(SimError::Config(format!("duplicate request id {}", r.id)));
            }
        }

        if self.baseline_latency(1)? <= 0.0 {
            return Err(SimError::Config(format!(
                "plain-decode latency for `{}` must be positive",
                plan.config.id
            )));
        }
        if !self.stack.is_speculative() {
            return Ok(());
        }

        let top = plan.window.max(plan.window_limit);
        if plan.window == 0 {
            return Err(SimError::Config("plan window must be at least 1".into()));
        }
        self.model.draft_model(&plan.method, plan.draft_gpus.max(1))?;
        for w in 1..=top {
            let v = self.model.verify_model(&plan.config.id, w)?;
            if v.eval_batch(1) <= 0.0 {
                return Err(SimError::Config(format!(
                    "verify[{}][{w}] latency must be positive",
                    plan.config.id
                )));
            }
        }
        self.historical_rate(&plan.method)?;
        for r in &self.trace {
            if r.accept_prob(&plan.method).is_none() {
                return Err(SimError::Config(format!(
                    "request {} has no acceptance rate for `{}`",
                    r.id, plan.method
                )));
            }
        }
        if self.stack.bon {
            if self.methods.is_empty() {
                return Err(SimError::Config("best-of-n needs at least one method".into()));
            }
            for m in &self.methods {
                self.model.draft_model(m, 1)?;
                self.historical_rate(m)?;
                if let Some(r) = self.trace.iter().find(|r| r.accept_prob(m).is_none()) {
                    return Err(SimError::Config(format!(
                        "request {} has no acceptance rate for `{m}`",
                        r.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn baseline_latency(&self, b: usize) -> Result<f64, SimError> {
        Ok(self.model.baseline_model(&self.plan.config.id)?.eval_batch(b))
    }
}
