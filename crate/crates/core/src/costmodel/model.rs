use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::speculation::{expected_tokens_coupled, expected_tokens_decoupled};
use super::{check_probability, check_window, AffineLatencyModel, CostModelError};
use crate::Scalar;

/// An admissible way to shard the target model for verification.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub id: String,
    pub gpus: u32,
    /// Parallelism label, informational only (e.g. `tp4`).
    #[serde(default)]
    pub label: String,
}

/// Where one speculation instance runs: which drafter, on how many GPUs, and
/// which verification configuration checks its windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement<'a> {
    pub method: &'a str,
    pub draft_gpus: u32,
    pub config: &'a str,
}

/// Fitted latency models for a cluster.
///
/// `draft[method][g_d]` is the per-token draft step latency with `g_d` drafter
/// GPUs, `verify[config][w]` the latency of verifying a window of `w` tokens,
/// and `baseline[config]` the plain autoregressive decode step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel<T> {
    pub total_gpus: u32,
    pub verify_configs: Vec<VerifyConfig>,
    pub draft: BTreeMap<String, BTreeMap<u32, AffineLatencyModel<T>>>,
    pub verify: BTreeMap<String, BTreeMap<u32, AffineLatencyModel<T>>>,
    #[serde(default)]
    pub baseline: BTreeMap<String, AffineLatencyModel<T>>,
}

impl<T: Scalar> CostModel<T> {
    pub fn validate(&self) -> Result<(), CostModelError> {
        let invalid = |key: String, reason: String| CostModelError::InvalidModel { key, reason };
        if self.total_gpus == 0 {
            return Err(invalid("total_gpus".into(), "cluster has no GPUs".into()));
        }
        for c in &self.verify_configs {
            if c.gpus == 0 {
                return Err(invalid(format!("verify_configs.{}", c.id), "zero GPUs".into()));
            }
            if c.gpus > self.total_gpus {
                return Err(invalid(
                    format!("verify_configs.{}", c.id),
                    format!("{} GPUs exceed the cluster's {}", c.gpus, self.total_gpus),
                ));
            }
        }
        let mut ids: Vec<&str> = self.verify_configs.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("verify_configs".into(), "duplicate configuration id".into()));
        }
        for (m, table) in &self.draft {
            for (g, model) in table {
                if *g == 0 {
                    return Err(invalid(format!("draft[{m}][0]"), "zero drafter GPUs".into()));
                }
                model.validate(&format!("draft[{m}][{g}]"))?;
            }
        }
        for (c, table) in &self.verify {
            for (w, model) in table {
                if *w == 0 {
                    return Err(invalid(format!("verify[{c}][0]"), "zero window".into()));
                }
                model.validate(&format!("verify[{c}][{w}]"))?;
            }
        }
        for (c, model) in &self.baseline {
            model.validate(&format!("baseline[{c}]"))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, CostModelError> {
        let model: Self = serde_json::from_str(text).map_err(|e| CostModelError::InvalidModel {
            key: "<file>".into(),
            reason: e.to_string(),
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, CostModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| CostModelError::InvalidModel {
            key: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost model serializes")
    }

    pub fn config(&self, id: &str) -> Result<&VerifyConfig, CostModelError> {
        self.verify_configs
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| CostModelError::MissingEntry(format!("verify_configs.{id}")))
    }

    pub fn draft_model(&self, method: &str, draft_gpus: u32) -> Result<&AffineLatencyModel<T>, CostModelError> {
        self.draft
            .get(method)
            .and_then(|t| t.get(&draft_gpus))
            .ok_or_else(|| CostModelError::MissingEntry(format!("draft[{method}][{draft_gpus}]")))
    }

    pub fn verify_model(&self, config: &str, w: u32) -> Result<&AffineLatencyModel<T>, CostModelError> {
        self.verify
            .get(config)
            .and_then(|t| t.get(&w))
            .ok_or_else(|| CostModelError::MissingEntry(format!("verify[{config}][{w}]")))
    }

    pub fn baseline_model(&self, config: &str) -> Result<&AffineLatencyModel<T>, CostModelError> {
        self.baseline
            .get(config)
            .ok_or_else(|| CostModelError::MissingEntry(format!("baseline[{config}]")))
    }

    /// Largest `w` such that `verify[config][1..=w]` are all present.
    pub fn max_window(&self, config: &str) -> u32 {
        let Some(table) = self.verify.get(config) else {
            return 0;
        };
        let mut w = 0;
        while table.contains_key(&(w + 1)) {
            w += 1;
        }
        w
    }

    pub fn draft_latency(&self, method: &str, draft_gpus: u32, b: usize) -> Result<T, CostModelError> {
        if b == 0 {
            return Err(CostModelError::ZeroBatch);
        }
        Ok(self.draft_model(method, draft_gpus)?.eval_batch(b))
    }

    pub fn verify_latency(&self, config: &str, w: u32, b: usize) -> Result<T, CostModelError> {
        if b == 0 {
            return Err(CostModelError::ZeroBatch);
        }
        Ok(self.verify_model(config, w)?.eval_batch(b))
    }

    /// Pipelined iteration latency `max(w * D(b), V_w(b))`.
    pub fn iteration_latency(&self, at: Placement<'_>, w: u32, b: usize) -> Result<T, CostModelError> {
        check_window(w)?;
        let draft = T::from_count(w as usize) * self.draft_latency(at.method, at.draft_gpus, b)?;
        Ok(draft.max(self.verify_latency(at.config, w, b)?))
    }

    /// Serialized iteration latency `w * D(b) + V_w(b)`.
    pub fn coupled_iteration_latency(&self, at: Placement<'_>, w: u32, b: usize) -> Result<T, CostModelError> {
        check_window(w)?;
        let draft = T::from_count(w as usize) * self.draft_latency(at.method, at.draft_gpus, b)?;
        Ok(draft + self.verify_latency(at.config, w, b)?)
    }

    /// Expected tokens per millisecond under decoupled execution.
    pub fn tgs_decoupled(&self, at: Placement<'_>, w: u32, b: usize, p: T) -> Result<T, CostModelError> {
        check_probability(p)?;
        Ok(expected_tokens_decoupled(p, w)? / self.iteration_latency(at, w, b)?)
    }

    /// Expected tokens per millisecond under coupled execution.
    pub fn tgs_coupled(&self, at: Placement<'_>, w: u32, b: usize, p: T) -> Result<T, CostModelError> {
        check_probability(p)?;
        Ok(expected_tokens_coupled(p, w)? / self.coupled_iteration_latency(at, w, b)?)
    }

    /// Tokens per millisecond of plain decoding.
    pub fn tgs_plain(&self, config: &str, b: usize) -> Result<T, CostModelError> {
        if b == 0 {
            return Err(CostModelError::ZeroBatch);
        }
        Ok(T::one() / self.baseline_model(config)?.eval_batch(b))
    }

    /// Every model multiplied by `k`.
    pub fn scaled(&self, k: T) -> Self {
        let scale_table = |t: &BTreeMap<u32, AffineLatencyModel<T>>| {
            t.iter().map(|(k2, m)| (*k2, m.scaled(k))).collect::<BTreeMap<_, _>>()
        };
        Self {
            total_gpus: self.total_gpus,
            verify_configs: self.verify_configs.clone(),
            draft: self.draft.iter().map(|(m, t)| (m.clone(), scale_table(t))).collect(),
            verify: self.verify.iter().map(|(c, t)| (c.clone(), scale_table(t))).collect(),
            baseline: self.baseline.iter().map(|(c, m)| (c.clone(), m.scaled(k))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat(d: f64, v: f64) -> CostModel<f64> {
        let m = |x: f64| AffineLatencyModel { slope: 0.0, intercept: x };
        CostModel {
            total_gpus: 2,
            verify_configs: vec![VerifyConfig { id: "tp1".into(), gpus: 1, label: String::new() }],
            draft: BTreeMap::from([("d".into(), BTreeMap::from([(1, m(d))]))]),
            verify: BTreeMap::from([("tp1".into(), (1..=8).map(|w| (w, m(v))).collect())]),
            baseline: BTreeMap::from([("tp1".into(), m(v))]),
        }
    }

    const AT: Placement<'static> = Placement { method: "d", draft_gpus: 1, config: "tp1" };

    #[test]
    fn iteration_latency_takes_the_slower_lane() {
        assert_eq!(flat(2.0, 5.0).iteration_latency(AT, 3, 1).unwrap(), 6.0);
        assert_eq!(flat(1.0, 9.0).iteration_latency(AT, 3, 1).unwrap(), 9.0);
    }

    #[test]
    fn iteration_latency_affine_arithmetic() {
        let mut model = flat(0.0, 0.0);
        model.draft.get_mut("d").unwrap().insert(1, AffineLatencyModel { slope: 0.01, intercept: 1.0 });
        model.verify.get_mut("tp1").unwrap().insert(4, AffineLatencyModel { slope: 0.05, intercept: 3.0 });
        // max(4 * 2.28, 9.4)
        assert_relative_eq!(model.iteration_latency(AT, 4, 128).unwrap(), 9.4, epsilon = 1e-12);
    }

    #[test]
    fn missing_entry_names_key() {
        let model = flat(1.0, 1.0);
        let err = model.iteration_latency(AT, 9, 1).unwrap_err();
        assert_eq!(err, CostModelError::MissingEntry("verify[tp1][9]".into()));
        let at = Placement { method: "x", ..AT };
        assert_eq!(
            model.tgs_decoupled(at, 1, 1, 0.5).unwrap_err(),
            CostModelError::MissingEntry("draft[x][1]".into())
        );
    }

    #[test]
    fn tgs_decoupled_examples() {
        let model = flat(2.0, 5.0);
        assert_relative_eq!(model.tgs_decoupled(AT, 3, 1, 0.5).unwrap(), 1.0625 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(model.tgs_decoupled(AT, 3, 1, 0.0).unwrap(), 0.5 / 6.0, epsilon = 1e-12);
        let doubled = model.scaled(2.0);
        assert_relative_eq!(
            doubled.tgs_decoupled(AT, 3, 1, 0.7).unwrap() * 2.0,
            model.tgs_decoupled(AT, 3, 1, 0.7).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn tgs_coupled_examples() {
        let model = flat(1.0, 1.0);
        assert_relative_eq!(model.tgs_coupled(AT, 3, 1, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(model.tgs_coupled(AT, 3, 1, 0.0).unwrap(), 0.25, epsilon = 1e-12);
        // Low acceptance: serialized execution wins at b = 1.
        let model = flat(1.0, 2.0);
        let c = model.tgs_coupled(AT, 4, 1, 0.05).unwrap();
        let d = model.tgs_decoupled(AT, 4, 1, 0.05).unwrap();
        assert!(c > d, "coupled {c} vs decoupled {d}");
    }

    #[test]
    fn json_round_trip_and_validation() {
        let model = flat(1.0, 2.0);
        let back = CostModel::<f64>::from_json(&model.to_json()).unwrap();
        assert_eq!(model, back);
        let mut bad = model.clone();
        bad.verify_configs[0].gpus = 3;
        assert!(bad.validate().is_err());
        let text = model.to_json().replace("\"slope\": 0.0", "\"slope\": -1.0");
        assert!(CostModel::<f64>::from_json(&text).is_err());
    }

    #[test]
    fn max_window_requires_contiguous_entries() {
        let mut model = flat(1.0, 1.0);
        assert_eq!(model.max_window("tp1"), 8);
        model.verify.get_mut("tp1").unwrap().remove(&3);
        assert_eq!(model.max_window("tp1"), 2);
        assert_eq!(model.max_window("nope"), 0);
    }
}
