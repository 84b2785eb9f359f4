use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use specroll::CostModel64;

fn specroll(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specroll"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn profile_csv(noise: f64, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut jitter = || if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
    let mut text = String::from("b,latency_ms,key\n");
    for b in [1usize, 2, 4, 8, 16, 32, 64, 128] {
        let x = b as f64;
        text.push_str(&format!("{b},{},draft/small/1\n", 0.02 * x + 3.0 + jitter()));
        text.push_str(&format!("{b},{},baseline/tp2\n", 0.2 * x + 20.0 + jitter()));
        for w in 1..=4 {
            let y = 0.2 * (1.0 + 0.5 * f64::from(w)) * x + 20.0 + f64::from(w) + jitter();
            text.push_str(&format!("{b},{y},verify/tp2/{w}\n"));
        }
    }
    text
}

fn residuals(dir: &Path) -> Vec<f64> {
    let mut reader = csv::Reader::from_path(dir.join("fit_residuals.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    let col = header.iter().position(|h| h == "residual_rms").unwrap();
    reader.records().map(|r| r.unwrap()[col].parse().unwrap()).collect()
}

#[test]
fn fit_recovers_exact_lines() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("profile.csv");
    std::fs::write(&csv, profile_csv(0.0, 0)).unwrap();
    let out = dir.path().join("out");
    let o = specroll(&["fit", "--samples", csv.to_str().unwrap(), "--gpus", "tp2=2"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(residuals(&out).iter().all(|&r| r < 1e-9));
    let model = CostModel64::load(&out.join("cost_model.json")).unwrap();
    assert_eq!(model.total_gpus, 3);
    let v3 = model.verify_model("tp2", 3).unwrap();
    assert!((v3.slope - 0.5).abs() < 1e-9 && (v3.intercept - 23.0).abs() < 1e-9);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("residual"), "{stdout}");
}

#[test]
fn fit_residuals_track_the_noise_level() {
    let sigma = 0.5;
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("profile.csv");
    std::fs::write(&csv, profile_csv(sigma, 42)).unwrap();
    let out = dir.path().join("out");
    let o = specroll(&["fit", "--samples", csv.to_str().unwrap(), "--gpus", "tp2=2"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for r in residuals(&out) {
        assert!(r > 0.0 && r <= 2.0 * sigma, "rms {r}");
    }
}

#[test]
fn fit_reports_missing_column_as_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("profile.csv");
    std::fs::write(&csv, "b,key\n1,draft/small/1\n2,draft/small/1\n").unwrap();
    let o = specroll(&["fit", "--samples", csv.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("latency_ms"), "{err}");
}

#[test]
fn fit_reports_rank_deficient_keys() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("profile.csv");
    std::fs::write(&csv, "b,latency_ms,key\n4,10,draft/a/1\n4,10,draft/a/1\n1,3,draft/b/1\n2,5,draft/b/1\n").unwrap();
    let o = specroll(&["fit", "--samples", csv.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("draft/a/1") && !err.contains("draft/b/1"), "{err}");
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ok = specroll(&["plan", "--batch", "64"], &dir.path().join("plan"));
    assert_eq!(ok.status.code(), Some(0));
    assert!(dir.path().join("plan/plan.json").exists());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "x", "nonsense": true}"#).unwrap();
    let o = specroll(&["--config", bad.to_str().unwrap(), "simulate"], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));

    let o = specroll(&["--scenario", "nope", "ladder"], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));

    let o = specroll(&["plan", "--p", "1.5"], &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));

    // Output directory that is actually a file.
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    let o = specroll(&["ladder"], &blocker);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn timeline_and_ladder_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = specroll(&["ladder"], dir.path());
    assert!(o.status.success());
    let ladder = std::fs::read_to_string(dir.path().join("ladder.csv")).unwrap();
    assert!(ladder.starts_with("method,rate,speedup"), "{ladder}");

    let o = specroll(&["--seed", "2", "timeline"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["timeline.csv", "workers.csv", "events.csv", "tgs.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
