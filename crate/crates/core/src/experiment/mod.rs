//! Scenario files and the drivers behind the `specroll` subcommands.
//!
//! A scenario names a trace (generated from a [`TraceSpec`] or read from a
//! file), a cost model, the default drafting method and the simulator knobs.
//! Each driver returns a [`Report`]: a short human summary plus the files to
//! write. Reports are pure functions of the scenario and seeds.

mod drivers;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bon::{BonPolicy, ScaleCost, DEFAULT_B_MAX};
use crate::costmodel::{CostModel, CostModelError};
use crate::planner::PlanError;
use crate::specsim::{trace_means, trace_methods, PolicyStack, SimError, DEFAULT_RECONFIG_INTERVAL};
use crate::workload::{gen_trace, load_trace, Request, TraceSpec, WorkloadError, DEFAULT_ESTIMATOR_WINDOW};

pub use drivers::{
    build_plan, cmd_compare, cmd_fit, cmd_ladder, cmd_plan, cmd_simulate, cmd_sweep, cmd_timeline,
    run_one, select_method, sequence_digest, FitOptions, PlanQuery, RunResult,
};
pub use report::{Artifact, Report};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] CostModelError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

impl ExperimentError {
    /// Bad inputs, as opposed to a failure while running.
    pub fn is_config(&self) -> bool {
        match self {
            ExperimentError::Config(_)
            | ExperimentError::Json { .. }
            | ExperimentError::Csv(_)
            | ExperimentError::Plan(_)
            | ExperimentError::Model(_)
            | ExperimentError::Workload(_) => true,
            ExperimentError::Io { .. } => false,
            ExperimentError::Sim(e) => e.is_config(),
        }
    }
}

/// Cost model given inline or as a path to a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ModelSource {
    Inline(CostModel<f64>),
    Path(PathBuf),
}

// Not derived: untagged buffering loses the integer map keys of the model.
impl<'de> Deserialize<'de> for ModelSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(p) => Ok(ModelSource::Path(p.into())),
            v => CostModel::deserialize(v).map(ModelSource::Inline).map_err(D::Error::custom),
        }
    }
}

/// Simulator settings shared by every run of a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimKnobs {
    pub bonus_token: bool,
    pub prepare_learn_ms: f64,
    pub b_max: usize,
    pub bon_policy: BonPolicy,
    pub scale: ScaleCost<f64>,
    pub reconfig_interval: u32,
    pub estimator_window: usize,
    pub check_invariants: bool,
}

impl Default for SimKnobs {
    fn default() -> Self {
        Self {
            bonus_token: false,
            prepare_learn_ms: 0.0,
            b_max: DEFAULT_B_MAX,
            bon_policy: BonPolicy::Greedy,
            scale: ScaleCost::free(),
            reconfig_interval: DEFAULT_RECONFIG_INTERVAL,
            estimator_window: DEFAULT_ESTIMATOR_WINDOW,
            check_invariants: false,
        }
    }
}

/// Batch-size grid for `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub batches: Vec<usize>,
    pub stacks: Vec<PolicyStack>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            batches: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
            stacks: vec![PolicyStack::PLAIN, PolicyStack::COUPLED, PolicyStack::DECOUPLED],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Synthetic trace; its `seed` is replaced by each run seed.
    #[serde(default)]
    pub trace: Option<TraceSpec>,
    /// Fixed trace file, used as-is for every seed.
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
    pub cost_model: ModelSource,
    /// Drafting method of the speculative policies without reconfiguration.
    pub default_method: String,
    /// Candidate drafting methods for the ladder and best-of-n. Defaults to
    /// every method in the trace.
    #[serde(default)]
    pub methods: Vec<String>,
    /// Historical acceptance rate per method. Defaults to the trace's Beta
    /// means (or sample means for a trace file).
    #[serde(default)]
    pub historical: BTreeMap<String, f64>,
    #[serde(default = "default_stack")]
    pub stack: PolicyStack,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub sim: SimKnobs,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default = "default_compare")]
    pub compare: Vec<PolicyStack>,
    #[serde(default = "default_ladder_step")]
    pub ladder_step: f64,
    #[serde(default = "default_bucket")]
    pub timeline_bucket_ms: f64,
}

fn default_stack() -> PolicyStack {
    PolicyStack::FULL
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_compare() -> Vec<PolicyStack> {
    let mut v = vec![PolicyStack::PLAIN];
    v.extend(PolicyStack::ABLATION);
    v.dedup();
    v
}

fn default_ladder_step() -> f64 {
    0.05
}

fn default_bucket() -> f64 {
    1000.0
}

const BUILTIN: [(&str, &str); 2] = [
    ("default", include_str!("../../scenarios/default.json")),
    ("sweep", include_str!("../../scenarios/sweep.json")),
];

/// Names of the scenarios compiled into the binary.
pub fn builtin_names() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

/// A scenario compiled into the binary. Its cost model is inline.
pub fn builtin(name: &str) -> Result<Scenario, ExperimentError> {
    let text = BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            ExperimentError::Config(format!(
                "no built-in scenario `{name}` (have: {})",
                builtin_names().join(", ")
            ))
        })?;
    Scenario::from_json(text, Path::new("."))
}

/// A validated scenario with its cost model and historical rates resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: ExperimentConfig,
    pub model: CostModel<f64>,
    pub methods: Vec<String>,
    pub historical: BTreeMap<String, f64>,
    fixed_trace: Option<Vec<Request>>,
}

fn read(path: &Path) -> Result<String, ExperimentError> {
    std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

impl Scenario {
    /// Loads a scenario file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self, ExperimentError> {
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|source| ExperimentError::Json { context: "scenario".into(), source })?;
        Self::new(config, base)
    }

    pub fn new(mut config: ExperimentConfig, base: &Path) -> Result<Self, ExperimentError> {
        let model = match &config.cost_model {
            ModelSource::Inline(m) => m.clone(),
            ModelSource::Path(p) => {
                let p = base.join(p);
                CostModel::from_json(&read(&p)?)?
            }
        };
        model.validate()?;
        let fixed_trace = match (&config.trace, &config.trace_path) {
            (Some(_), Some(_)) => {
                return Err(ExperimentError::Config("give either `trace` or `trace_path`, not both".into()))
            }
            (None, None) => return Err(ExperimentError::Config("scenario needs `trace` or `trace_path`".into())),
            (Some(spec), None) => {
                spec.validate()?;
                None
            }
            (None, Some(p)) => Some(load_trace(&base.join(p))?),
        };
        if let Some(dir) = &config.out_dir {
            config.out_dir = Some(base.join(dir));
        }
        let (trace_methods, means) = match (&config.trace, &fixed_trace) {
            (Some(spec), _) => (
                spec.methods.keys().cloned().collect::<Vec<_>>(),
                spec.methods.iter().map(|(m, b)| (m.clone(), b.mean())).collect(),
            ),
            (None, Some(t)) => (trace_methods(t), trace_means(t)),
            (None, None) => unreachable!("checked above"),
        };
        let methods = if config.methods.is_empty() { trace_methods } else { config.methods.clone() };
        let mut historical = means;
        historical.extend(config.historical.iter().map(|(k, v)| (k.clone(), *v)));

        let scenario = Self { config, model, methods, historical, fixed_trace };
        scenario.validate()?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        let c = &self.config;
        let bad = |m: String| Err(ExperimentError::Config(m));
        if c.seeds.is_empty() {
            return bad("`seeds` must not be empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = c.seeds.iter().find(|s| !seen.insert(**s)) {
            return bad(format!("seed {s} listed twice"));
        }
        if !self.historical.contains_key(&c.default_method) {
            return bad(format!("default method `{}` has no acceptance rates in the trace", c.default_method));
        }
        for m in &self.methods {
            if !self.historical.contains_key(m) {
                return bad(format!("method `{m}` has no historical acceptance rate"));
            }
        }
        if let Some((m, p)) = self.historical.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return bad(format!("historical rate {p} for `{m}` outside [0, 1]"));
        }
        if !(c.ladder_step > 0.0 && c.ladder_step <= 1.0) {
            return bad(format!("ladder_step {} must lie in (0, 1]", c.ladder_step));
        }
        if !(c.timeline_bucket_ms > 0.0 && c.timeline_bucket_ms.is_finite()) {
            return bad("timeline_bucket_ms must be positive".into());
        }
        if c.sweep.batches.contains(&0) {
            return bad("sweep batch sizes must be at least 1".into());
        }
        for s in c.sweep.stacks.iter().chain(&c.compare).chain(std::iter::once(&c.stack)) {
            s.validate()?;
        }
        Ok(())
    }

    /// Batch size of the scenario's trace.
    pub fn batch_size(&self) -> usize {
        match (&self.config.trace, &self.fixed_trace) {
            (_, Some(t)) => t.len(),
            (Some(spec), None) => spec.batch_size,
            (None, None) => 0,
        }
    }

    /// The trace for a run seed, optionally resized to `batch` requests.
    pub fn trace(&self, seed: u64, batch: Option<usize>) -> Result<Vec<Request>, ExperimentError> {
        match (&self.config.trace, &self.fixed_trace) {
            (_, Some(t)) => {
                let n = batch.unwrap_or(t.len());
                if n > t.len() {
                    return Err(ExperimentError::Config(format!(
                        "batch {n} exceeds the {} requests in the trace file",
                        t.len()
                    )));
                }
                Ok(t[..n].to_vec())
            }
            (Some(spec), None) => {
                let mut spec = spec.clone();
                spec.seed = seed;
                if let Some(b) = batch {
                    spec.batch_size = b;
                }
                Ok(gen_trace(&spec)?)
            }
            (None, None) => unreachable!("validated"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_load() {
        for name in builtin_names() {
            let s = builtin(name).unwrap();
            assert!(s.methods.contains(&s.config.default_method), "{name}");
        }
        assert!(builtin("nope").unwrap_err().is_config());
    }

    #[test]
    fn rejects_duplicate_seeds_and_unknown_fields() {
        let base = builtin("default").unwrap().config;
        let mut c = base.clone();
        c.seeds = vec![1, 1];
        assert!(Scenario::new(c, Path::new(".")).unwrap_err().is_config());

        let mut v = serde_json::to_value(&base).unwrap();
        v["colour"] = serde_json::json!("red");
        let err = Scenario::from_json(&v.to_string(), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn trace_seed_follows_the_run_seed() {
        let s = builtin("default").unwrap();
        let a = s.trace(1, Some(8)).unwrap();
        let b = s.trace(2, Some(8)).unwrap();
        assert_eq!(a.len(), 8);
        assert_ne!(a, b);
        assert_eq!(a, s.trace(1, Some(8)).unwrap());
    }
}
