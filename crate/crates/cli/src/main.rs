use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use leo_collab::bench::{run_grid, ExperimentGrid};
use leo_collab::config::RunConfig;
use leo_collab::optimizer::{run, OptimizerConfig, Routing, ScenarioEvaluator};
use leo_collab::qmix::{train, Policy};
use leo_collab::Error;

mod manifest;
mod output;

use manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "leocollab", version, about = "Delay-aware large/small model collaboration over a LEO constellation")]
struct Cli {
    /// TOML run configuration, or a manifest.json from an earlier run.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration value, e.g. `--set env.mu=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory; defaults to `output_dir` from the configuration.
    #[arg(long, global = true, env = "LEOCOLLAB_OUTPUT_DIR", value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case", tag = "command")]
enum Command {
    /// Export the ISL topology of one time slot as JSON.
    Topology {
        #[arg(long)]
        slot: Option<u64>,
    },
    /// Train a routing policy and write its learning curve.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Route one round greedily at a fixed allocation ratio.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Run the allocation-ratio bisection and write one row per iteration.
    Bisect {
        /// Learned routing; shortest-path routing without it.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        /// Keep iterating after the objective rises.
        #[arg(long)]
        no_early_stop: bool,
    },
    /// Run the scheme comparison grid from the `[bench]` section.
    Bench {
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Grid file replacing the `[bench]` section.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Write a step-by-step transcript of one greedy episode.
    Replay {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Topology { .. } => "topology",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Bisect { .. } => "bisect",
            Command::Bench { .. } => "bench",
            Command::Replay { .. } => "replay",
        }
    }
}

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_DIVERGENCE: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Infeasible { .. } | Error::Optimizer(_)) => EXIT_INFEASIBLE,
        Some(Error::Divergence(_)) => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        None => RunConfig::default(),
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            let m = Manifest::load(p)?;
            RunConfig::from_toml(&m.config).with_context(|| format!("config stored in {}", p.display()))?
        }
        Some(p) => RunConfig::load(p)?,
    };
    Ok(base.with_overrides(&cli.overrides)?)
}

fn load_policy(path: &Path) -> anyhow::Result<Policy> {
    Policy::load(path).with_context(|| format!("loading policy {}", path.display()))
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    // folded into the config so the manifest alone reproduces the run
    let grid = match &cli.command {
        Command::Bench { grid: Some(p), .. } => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config(format!("reading {}: {e}", p.display())))?;
            cfg.bench = ExperimentGrid::from_toml(&text).with_context(|| format!("grid file {}", p.display()))?;
            Some(p)
        }
        _ => None,
    };
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Error::config("--workers must be at least 1").into());
    }
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir)).join(cli.command.name());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = Manifest::new(&cfg, &cli.command, &cli.overrides)?;
    if let Some(p) = grid {
        manifest.input("grid", p)?;
    }

    match &cli.command {
        Command::Topology { slot } => {
            let c = cfg.constellation(cfg.seed)?;
            let slot = slot.unwrap_or(cfg.constellation.slot);
            let snap = leo_collab::constellation::snapshot_topology(&c, slot, &cfg.constellation.link);
            let json = serde_json::to_string_pretty(&output::topology_json(&c, &snap))?;
            println!("{json}");
            manifest.write(&dir, "topology.json", json.as_bytes())?;
        }
        Command::Train { epochs } => {
            let mut tc = cfg.training.clone();
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let sampler = cfg.sampler()?;
            let mut out = train(|r| sampler.sample(r), &tc, cfg.seed)?;
            out.policy.config_hash = cfg.hash();
            let last = out.curves.last();
            eprintln!(
                "trained {} epochs; final mean reward {:.3}, completion {:.3}",
                out.curves.len(),
                last.map_or(f64::NAN, |c| c.mean_reward),
                last.map_or(f64::NAN, |c| c.completion_rate)
            );
            manifest.write(&dir, "policy.json", &serde_json::to_vec(&out.policy)?)?;
            manifest.write(&dir, "learning_curve.csv", &output::csv_bytes(&out.curves)?)?;
        }
        Command::Evaluate { policy, alpha } => {
            manifest.input("policy", policy)?;
            let policy = load_policy(policy)?;
            let scenario = cfg.scenario(cfg.seed)?;
            let mut ev = ScenarioEvaluator::new(&scenario, Routing::Learned(&policy), cfg.env.clone())?;
            let alphas = vec![*alpha; scenario.tasks.len()];
            let result = leo_collab::optimizer::DelayEvaluator::evaluate(&mut ev, &alphas)?;
            let rows = output::evaluation_rows(&scenario, &result);
            match result.objective() {
                Some(o) => eprintln!("mean service delay {o:.4} s"),
                None => eprintln!("some tasks were not served; see the status column"),
            }
            manifest.write(&dir, "evaluation.csv", &output::csv_bytes(&rows)?)?;
        }
        Command::Bisect { policy, iters, no_early_stop } => {
            let loaded = match policy {
                Some(p) => {
                    manifest.input("policy", p)?;
                    Some(load_policy(p)?)
                }
                None => None,
            };
            let routing = loaded.as_ref().map_or(Routing::ShortestPath, Routing::Learned);
            let opt = OptimizerConfig {
                iterations: iters.unwrap_or(cfg.optimizer.iterations),
                early_stop: cfg.optimizer.early_stop && !no_early_stop,
            };
            let scenario = cfg.scenario(cfg.seed)?;
            let mut ev = ScenarioEvaluator::new(&scenario, routing, cfg.env.clone())?;
            let outcome = run(&mut ev, &opt)?;
            eprintln!(
                "best objective {:.4} s at iteration {} of {}{}",
                outcome.best.objective().unwrap_or(f64::NAN),
                outcome.best_k,
                outcome.trace.len(),
                if outcome.stopped_early { " (stopped early)" } else { "" }
            );
            manifest.write(&dir, "bisect.csv", &output::csv_bytes(&output::bisect_rows(&outcome))?)?;
        }
        Command::Bench { policy, .. } => {
            let loaded = match policy {
                Some(p) => {
                    manifest.input("policy", p)?;
                    Some(load_policy(p)?)
                }
                None => None,
            };
            if loaded.is_none() {
                if let Some(s) = cfg.bench.schemes.iter().find(|s| s.needs_policy()) {
                    bail!(Error::config(format!(
                        "scheme {s} needs --policy; train one first or restrict bench.schemes"
                    )));
                }
            }
            let variable = cfg.bench.variable;
            let rows = run_grid(&cfg.bench, |v, seed| cfg.cell(variable, v, seed), loaded.as_ref(), &cfg.env, workers)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            eprintln!("{} cells, {failed} failed", rows.len());
            manifest.write(&dir, "bench.csv", &output::csv_bytes(&rows)?)?;
        }
        Command::Replay { policy, alpha } => {
            manifest.input("policy", policy)?;
            let policy = load_policy(policy)?;
            let scenario = cfg.scenario(cfg.seed)?;
            let origins = scenario.default_origins()?;
            let traffic = scenario
                .commit(&vec![*alpha; scenario.tasks.len()])
                .into_iter()
                .map(|c| c.map(|c| c.traffic))
                .collect::<leo_collab::Result<Vec<_>>>()?;
            let mut env = scenario.env(traffic, &origins, cfg.env.clone())?;
            let mut transcript = Vec::new();
            let signal = policy.run_greedy(&mut env, Some(&mut transcript))?;
            eprintln!("{} steps, {} of {} tasks completed, reward {:.4}", transcript.len(), signal.completed, env.num_tasks(), signal.total);
            let mut lines = Vec::new();
            for step in &transcript {
                serde_json::to_writer(&mut lines, step)?;
                lines.push(b'\n');
            }
            manifest.write(&dir, "transcript.jsonl", &lines)?;
        }
    }
    manifest.finish(&dir)?;
    Ok(())
}
