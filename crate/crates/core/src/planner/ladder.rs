use std::collections::BTreeMap;

use serde::Serialize;

use super::PlanError;
use crate::costmodel::{CostModel, Placement};
use crate::scalar::{clearly_greater, nearly_equal};
use crate::workload::ExecMode;
use crate::Scalar;

/// Method id under which plain decoding appears in ladder output.
pub const PLAIN_METHOD: &str = "plain";

/// Estimated speedup of each drafting method over plain decoding, tabulated
/// on a grid of acceptance rates at batch size one. Each entry takes the
/// better of coupled and decoupled execution, the same choice the
/// per-request reconfiguration makes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DraftLadder<T> {
    pub config: String,
    pub methods: Vec<String>,
    pub grid: Vec<T>,
    pub speedup: BTreeMap<String, Vec<T>>,
    /// Window achieving each speedup entry.
    pub windows: BTreeMap<String, Vec<u32>>,
    /// Execution mode achieving each speedup entry.
    pub modes: BTreeMap<String, Vec<ExecMode>>,
    /// Single-token draft latency at batch size one, used for tie-breaking.
    pub draft_cost: BTreeMap<String, T>,
}

/// `0, step, 2*step, ..., 1`.
pub fn default_grid<T: Scalar>(step: f64) -> Vec<T> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|i| T::lit((i as f64 * step).min(1.0))).collect()
}

pub fn build_ladder<T: Scalar>(
    methods: &[String],
    grid: &[T],
    model: &CostModel<T>,
    config: &str,
) -> Result<DraftLadder<T>, PlanError> {
    let baseline = model
        .baseline
        .get(config)
        .ok_or_else(|| PlanError::Config(format!("no plain-decode baseline for `{config}`")))?;
    let plain_rate = T::one() / baseline.eval_batch(1);
    let limit = model.max_window(config);
    if limit == 0 {
        return Err(PlanError::Config(format!("no verification windows profiled for `{config}`")));
    }
    let mut ladder = DraftLadder {
        config: config.to_string(),
        methods: methods.to_vec(),
        grid: grid.to_vec(),
        speedup: BTreeMap::new(),
        windows: BTreeMap::new(),
        modes: BTreeMap::new(),
        draft_cost: BTreeMap::new(),
    };
    for m in methods {
        let at = Placement { method: m, draft_gpus: 1, config };
        let mut row = Vec::with_capacity(grid.len());
        let mut wins = Vec::with_capacity(grid.len());
        let mut modes = Vec::with_capacity(grid.len());
        let decoupled_limit = super::window_limit(model, at)?;
        for &rate in grid {
            let (wc, tc) = super::best_window(model, at, limit, rate, ExecMode::Coupled)?;
            let (wd, td) = super::best_window(model, at, decoupled_limit, rate, ExecMode::Decoupled)?;
            let (w, tgs, mode) = if clearly_greater(td, tc) {
                (wd, td, ExecMode::Decoupled)
            } else {
                (wc, tc, ExecMode::Coupled)
            };
            row.push(tgs / plain_rate);
            wins.push(w);
            modes.push(mode);
        }
        ladder.speedup.insert(m.clone(), row);
        ladder.windows.insert(m.clone(), wins);
        ladder.modes.insert(m.clone(), modes);
        ladder.draft_cost.insert(m.clone(), model.draft_latency(m, 1, 1)?);
    }
    Ok(ladder)
}

impl<T: Scalar> DraftLadder<T> {
    /// Index of the grid point closest to `rate`; the lower point on a tie.
    pub fn nearest_index(&self, rate: T) -> usize {
        let mut best = 0;
        for (i, g) in self.grid.iter().enumerate() {
            if (*g - rate).abs() < (self.grid[best] - rate).abs() {
                best = i;
            }
        }
        best
    }

    pub fn speedup_at(&self, method: &str, rate: T) -> Result<T, PlanError> {
        if method == PLAIN_METHOD {
            return Ok(T::one());
        }
        let row = self
            .speedup
            .get(method)
            .ok_or_else(|| PlanError::Config(format!("method `{method}` not in ladder")))?;
        Ok(row[self.nearest_index(rate)])
    }

    /// `(method, rate, speedup)` rows, plain decoding first.
    pub fn rows(&self) -> Vec<(String, T, T)> {
        let mut rows: Vec<(String, T, T)> =
            self.grid.iter().map(|&r| (PLAIN_METHOD.to_string(), r, T::one())).collect();
        for m in &self.methods {
            for (i, &r) in self.grid.iter().enumerate() {
                rows.push((m.clone(), r, self.speedup[m][i]));
            }
        }
        rows
    }
}

/// Ranks each method by its ladder speedup at its historical acceptance rate
/// and returns the best; equal speedups go to the cheaper drafter.
pub fn initial_select<T: Scalar>(
    ladder: &DraftLadder<T>,
    historical: &BTreeMap<String, T>,
) -> Result<String, PlanError> {
    let mut best: Option<(&String, T, T)> = None;
    for m in &ladder.methods {
        let rate = *historical
            .get(m)
            .ok_or_else(|| PlanError::Config(format!("no historical acceptance rate for `{m}`")))?;
        let s = ladder.speedup_at(m, rate)?;
        let cost = ladder.draft_cost[m];
        let better = match best {
            None => true,
            Some((_, bs, bc)) => {
                (s > bs && !nearly_equal(s, bs)) || (nearly_equal(s, bs) && cost < bc)
            }
        };
        if better {
            best = Some((m, s, cost));
        }
    }
    best.map(|(m, _, _)| m.clone())
        .ok_or_else(|| PlanError::Config("ladder has no methods".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{expected_tokens_coupled, AffineLatencyModel, VerifyConfig};

    fn flat(x: f64) -> AffineLatencyModel<f64> {
        AffineLatencyModel { slope: 0.0, intercept: x }
    }

    fn model(drafts: &[(&str, f64)]) -> CostModel<f64> {
        CostModel {
            total_gpus: 2,
            verify_configs: vec![VerifyConfig { id: "v".into(), gpus: 1, label: String::new() }],
            draft: drafts
                .iter()
                .map(|(m, d)| (m.to_string(), BTreeMap::from([(1, flat(*d))])))
                .collect(),
            verify: BTreeMap::from([("v".into(), (1..=8).map(|w| (w, flat(10.0 + 0.5 * w as f64))).collect())]),
            baseline: BTreeMap::from([("v".into(), flat(10.0))]),
        }
    }

    fn names(ms: &[&str]) -> Vec<String> {
        ms.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn zero_acceptance_is_pure_overhead() {
        let m = model(&[("a", 1.0), ("b", 3.0)]);
        let ladder = build_ladder(&names(&["a", "b"]), &default_grid(0.05), &m, "v").unwrap();
        for meth in ["a", "b"] {
            assert!(ladder.speedup_at(meth, 0.0).unwrap() < 1.0);
        }
    }

    #[test]
    fn full_acceptance_favours_cheaper_drafter() {
        let m = model(&[("a", 1.0), ("b", 3.0)]);
        let ladder = build_ladder(&names(&["a", "b"]), &default_grid(0.05), &m, "v").unwrap();
        assert!(ladder.speedup_at("a", 1.0).unwrap() > ladder.speedup_at("b", 1.0).unwrap());
    }

    #[test]
    fn rows_are_increasing_in_rate_and_plain_is_flat() {
        let m = model(&[("a", 1.0)]);
        let ladder = build_ladder(&names(&["a"]), &default_grid(0.05), &m, "v").unwrap();
        let row = &ladder.speedup["a"];
        assert_eq!(row.len(), 21);
        assert!(row.windows(2).all(|p| p[1] > p[0]));
        assert!(ladder.rows().iter().filter(|r| r.0 == PLAIN_METHOD).all(|r| r.2 == 1.0));
    }

    #[test]
    fn ladder_entry_matches_closed_form() {
        // Drafter costs 0.2 of the verifier: D = 2, V_w = 10 (flat in w).
        let mut m = model(&[("a", 2.0)]);
        for w in 1..=8 {
            m.verify.get_mut("v").unwrap().insert(w, flat(10.0));
        }
        let ladder = build_ladder(&names(&["a"]), &[0.2, 0.8], &m, "v").unwrap();
        let (mut coupled, mut decoupled) = ([0.0f64; 2], [0.0f64; 2]);
        for (i, p) in [0.2f64, 0.8].into_iter().enumerate() {
            for w in 1..=8u32 {
                let tau_c = (1.0 - p.powi(w as i32 + 1)) / (1.0 - p);
                coupled[i] = coupled[i].max(tau_c / (2.0 * w as f64 + 10.0));
                // Decoupled windows stop at 5, where the drafter becomes the slower lane.
                if w <= 5 {
                    let mut tau_d = w as f64 * p.powi(w as i32);
                    for a in 0..w {
                        tau_d += p.powi(a as i32) * (1.0 - p) * (a as f64 + 1.0) / 2.0;
                    }
                    decoupled[i] = decoupled[i].max(tau_d / (2.0 * w as f64).max(10.0));
                }
            }
        }
        // Low acceptance: serialized execution wins; high acceptance: pipelined.
        assert!(coupled[0] > decoupled[0] && decoupled[1] > coupled[1]);
        assert!((ladder.speedup_at("a", 0.2).unwrap() - coupled[0] * 10.0).abs() < 1e-12);
        assert!((ladder.speedup_at("a", 0.8).unwrap() - decoupled[1] * 10.0).abs() < 1e-12);
        assert_eq!(ladder.modes["a"], vec![ExecMode::Coupled, ExecMode::Decoupled]);
        assert_eq!(ladder.windows["a"], vec![1, 5]);
        assert!((expected_tokens_coupled(0.2, 1).unwrap() / 12.0 - coupled[0]).abs() < 1e-12);
    }

    #[test]
    fn missing_baseline_is_config_error() {
        let mut m = model(&[("a", 1.0)]);
        m.baseline.clear();
        assert!(matches!(
            build_ladder(&names(&["a"]), &[0.5], &m, "v"),
            Err(PlanError::Config(_))
        ));
    }

    #[test]
    fn single_method_selected() {
        let m = model(&[("a", 1.0)]);
        let ladder = build_ladder(&names(&["a"]), &default_grid(0.05), &m, "v").unwrap();
        let hist = BTreeMap::from([("a".to_string(), 0.3)]);
        assert_eq!(initial_select(&ladder, &hist).unwrap(), "a");
    }

    #[test]
    fn identical_rates_prefer_cheaper_drafter() {
        let m = model(&[("b", 2.0), ("a", 1.0)]);
        let ladder = build_ladder(&names(&["b", "a"]), &default_grid(0.05), &m, "v").unwrap();
        let hist = BTreeMap::from([("a".to_string(), 0.5), ("b".to_string(), 0.5)]);
        assert_eq!(initial_select(&ladder, &hist).unwrap(), "a");
    }

    #[test]
    fn exact_speedup_tie_broken_by_draft_cost() {
        let ladder = DraftLadder {
            config: "v".into(),
            methods: names(&["x", "y"]),
            grid: vec![0.0, 0.5, 1.0],
            speedup: BTreeMap::from([
                ("x".to_string(), vec![0.5, 1.2, 2.0]),
                ("y".to_string(), vec![0.5, 1.2, 2.0]),
            ]),
            windows: BTreeMap::new(),
            modes: BTreeMap::new(),
            draft_cost: BTreeMap::from([("x".to_string(), 3.0), ("y".to_string(), 1.0)]),
        };
        let hist = BTreeMap::from([("x".to_string(), 0.5), ("y".to_string(), 0.5)]);
        assert_eq!(initial_select(&ladder, &hist).unwrap(), "y");
    }

    #[test]
    fn missing_history_is_config_error() {
        let m = model(&[("a", 1.0)]);
        let ladder = build_ladder(&names(&["a"]), &[0.5], &m, "v").unwrap();
        assert!(initial_select(&ladder, &BTreeMap::new()).is_err());
    }

    #[test]
    fn nearest_grid_point() {
        let m = model(&[("a", 1.0)]);
        let ladder = build_ladder(&names(&["a"]), &default_grid(0.05), &m, "v").unwrap();
        assert_eq!(ladder.nearest_index(0.61), 12);
        assert_eq!(ladder.nearest_index(0.0), 0);
        assert_eq!(ladder.nearest_index(1.0), 20);
    }
}
