use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use specroll::experiment::{self, ExperimentError, FitOptions, PlanQuery, Report, Scenario};

/// Virtual-time rollout simulator for speculative decoding.
#[derive(Parser, Debug)]
#[command(name = "specroll", version)]
struct Cli {
    /// Scenario file (JSON). Defaults to a built-in scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in scenario to use when no --config is given
    /// (`sweep` for the sweep subcommand, `default` otherwise).
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Run this seed instead of the scenario's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to the scenario's `out_dir`, else `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit affine latency models from a `b,latency_ms,key` profile CSV.
    Fit {
        /// Profile samples.
        #[arg(long)]
        samples: PathBuf,
        /// GPUs per verification config, as `id=N`; repeatable.
        #[arg(long = "gpus", value_parser = parse_gpus)]
        gpus: Vec<(String, u32)>,
        /// Cluster size; defaults to the largest verifier plus the largest drafter.
        #[arg(long)]
        total_gpus: Option<u32>,
    },
    /// Speedup of each drafting method over plain decoding by acceptance rate.
    Ladder,
    /// Best placement and window for a batch size and acceptance rate.
    Plan {
        /// Global batch size; defaults to the scenario's trace batch.
        #[arg(long)]
        batch: Option<usize>,
        /// Drafting method; defaults to the scenario's default method.
        #[arg(long)]
        method: Option<String>,
        /// Acceptance rate; defaults to the method's historical rate.
        #[arg(long = "p")]
        rate: Option<f64>,
    },
    /// Simulate one rollout step per seed under the scenario's policy stack.
    Simulate,
    /// Speedup over plain decoding across batch sizes.
    Sweep,
    /// Ablation across policy stacks.
    Compare,
    /// Per-worker timeline for one seed.
    Timeline,
}

fn parse_gpus(s: &str) -> Result<(String, u32), String> {
    let (id, n) = s.split_once('=').ok_or_else(|| format!("expected id=N, got `{s}`"))?;
    let n: u32 = n.parse().map_err(|_| format!("bad GPU count in `{s}`"))?;
    Ok((id.to_string(), n))
}

/// Config problems exit with 2, everything else with 1.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

fn scenario(cli: &Cli, fallback: &str) -> Result<Scenario, Failure> {
    let s = match &cli.config {
        Some(path) => Scenario::load(path)
            .map_err(|e| Failure::from(e))
            .map_err(|f| match f {
                Failure::Config(e) => Failure::Config(e.context(format!("loading {}", path.display()))),
                Failure::Runtime(e) => Failure::Config(e.context(format!("loading {}", path.display()))),
            })?,
        None => experiment::builtin(cli.scenario.as_deref().unwrap_or(fallback))?,
    };
    Ok(s)
}

fn seeds(cli: &Cli, s: &Scenario) -> Vec<u64> {
    match cli.seed {
        Some(seed) => vec![seed],
        None => s.config.seeds.clone(),
    }
}

fn out_dir(cli: &Cli, s: Option<&Scenario>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| s.and_then(|s| s.config.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: &Cli) -> Result<(Report, PathBuf), Failure> {
    Ok(match &cli.command {
        Command::Fit { samples, gpus, total_gpus } => {
            let text = std::fs::read_to_string(samples)
                .with_context(|| format!("reading {}", samples.display()))
                .map_err(Failure::Config)?;
            let opts = FitOptions {
                gpus: gpus.iter().cloned().collect::<BTreeMap<_, _>>(),
                total_gpus: *total_gpus,
            };
            (experiment::cmd_fit(&text, &opts)?, out_dir(cli, None))
        }
        Command::Ladder => {
            let s = scenario(cli, "default")?;
            (experiment::cmd_ladder(&s)?, out_dir(cli, Some(&s)))
        }
        Command::Plan { batch, method, rate } => {
            let s = scenario(cli, "default")?;
            let q = PlanQuery { batch: *batch, method: method.clone(), rate: *rate };
            (experiment::cmd_plan(&s, &q)?, out_dir(cli, Some(&s)))
        }
        Command::Simulate => {
            let s = scenario(cli, "default")?;
            (experiment::cmd_simulate(&s, &seeds(cli, &s))?, out_dir(cli, Some(&s)))
        }
        Command::Sweep => {
            let s = scenario(cli, "sweep")?;
            (experiment::cmd_sweep(&s, &seeds(cli, &s))?, out_dir(cli, Some(&s)))
        }
        Command::Compare => {
            let s = scenario(cli, "default")?;
            (experiment::cmd_compare(&s, &seeds(cli, &s))?, out_dir(cli, Some(&s)))
        }
        Command::Timeline => {
            let s = scenario(cli, "default")?;
            let seed = seeds(cli, &s)[0];
            (experiment::cmd_timeline(&s, seed)?, out_dir(cli, Some(&s)))
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = run(&cli).and_then(|(report, dir)| {
        report.write_to(&dir).map_err(|e| Failure::Runtime(anyhow!(e)))?;
        // A closed stdout (e.g. piped into `head`) is not an error.
        let mut out = std::io::stdout().lock();
        let _ = write!(out, "{}", report.summary);
        for a in &report.artifacts {
            let _ = writeln!(out, "wrote {}", dir.join(&a.name).display());
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
