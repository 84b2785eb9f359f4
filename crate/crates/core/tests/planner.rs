mod common;

use proptest::prelude::*;
use rand::Rng;
use specroll::planner::{build_ladder, default_grid, search_plan, window_limit};
use specroll::{CostModel32, Placement};

use common::{exhaustive_plan, random_cost_model, rng};

#[test]
fn pruned_search_matches_exhaustive_scan() {
    let mut r = rng(2024);
    let mut pruned_away = 0;
    for instance in 0..200 {
        let model = random_cost_model(&mut r);
        let batch = r.random_range(1..=512usize);
        let p = match instance % 10 {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.0..1.0),
        };
        let plan = search_plan(batch, &model, "d", p).unwrap();
        let (config, g, w, tgs) = exhaustive_plan(batch, &model, "d", p).unwrap();
        assert_eq!(
            (plan.config.id.as_str(), plan.draft_gpus, plan.window),
            (config.as_str(), g, w),
            "instance {instance}: batch {batch}, p {p}, model {}",
            model.to_json()
        );
        assert!((plan.tgs_estimate - tgs).abs() <= 1e-12 * tgs);
        let at = Placement { method: "d", draft_gpus: g, config: &config };
        if window_limit(&model, at).unwrap() < model.max_window(&config) {
            pruned_away += 1;
        }
    }
    // The prune must actually cut windows on a good share of instances.
    assert!(pruned_away > 20, "only {pruned_away} instances pruned");
}

#[test]
fn single_precision_agrees_with_double() {
    let mut r = rng(7);
    for _ in 0..50 {
        let model = random_cost_model(&mut r);
        let batch = r.random_range(1..=256usize);
        let p = r.random_range(0.05..0.95);
        let a = search_plan(batch, &model, "d", p).unwrap();
        let narrow: CostModel32 = serde_json::from_str(&model.to_json()).unwrap();
        let b = search_plan(batch, &narrow, "d", p as f32).unwrap();
        assert!((f64::from(b.tgs_estimate) - a.tgs_estimate).abs() <= 1e-4 * a.tgs_estimate);
    }
}

proptest! {
    #[test]
    fn ladder_speedup_is_monotone_in_rate(seed in any::<u64>()) {
        let model = random_cost_model(&mut rng(seed));
        let config = model.verify_configs[0].id.clone();
        let ladder = build_ladder(&["d".to_string()], &default_grid(0.05), &model, &config).unwrap();
        for pair in ladder.speedup["d"].windows(2) {
            prop_assert!(pair[1] >= pair[0] * (1.0 - 1e-12));
        }
    }
}
