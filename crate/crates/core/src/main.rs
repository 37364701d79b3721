use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use side::bench;
use side::commands::{self, CommandError};
use side::config::{parse_pairs, ConfigError, TrainConfig};

#[derive(Parser)]
#[command(
    name = "side",
    about = "Cooperative multi-agent Q-learning: VDN, QMIX and latent state inference",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Algorithm: vdn | qmix | qmix_po | qmix_ho | side.
    #[arg(long)]
    algorithm: Option<String>,
    /// Environment: two_step | treasure_grid.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total environment timesteps to train for.
    #[arg(long)]
    timesteps: Option<u64>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            pairs.extend(parse_pairs(&text)?);
        }
        if let Some(a) = &self.algorithm {
            pairs.push(("algorithm".into(), a.clone()));
        }
        if let Some(e) = &self.env {
            pairs.push(("env".into(), e.clone()));
        }
        if let Some(s) = self.seed {
            pairs.push(("seed".into(), s.to_string()));
        }
        if let Some(t) = self.timesteps {
            pairs.push(("total_timesteps".into(), t.to_string()));
        }
        if let Some(o) = &self.out {
            pairs.push(("out".into(), o.display().to_string()));
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or(ConfigError::Malformed { line: 0 })?;
            pairs.push((k.trim().into(), v.trim().into()));
        }
        TrainConfig::from_pairs(&pairs)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a team and write metrics, checkpoints and a run manifest.
    Train(ConfigArgs),
    /// Evaluate a trained checkpoint with the greedy policy.
    Eval {
        /// Run directory holding config.resolved and the checkpoint.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Explicit checkpoint path (overrides the run directory's).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Dump inferred latent states of greedy episodes as CSV.
    DumpLatents {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the scripted benchmark comparisons and write a summary table.
    Bench {
        /// Suite: two_step | grid | all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Parallel training runs.
        #[arg(long, default_value_t = 2)]
        jobs: usize,
        #[arg(long, default_value = "runs/bench")]
        out: PathBuf,
        /// Override the two-step suite's timestep budget.
        #[arg(long, default_value_t = bench::TWO_STEP_TIMESTEPS)]
        two_step_timesteps: u64,
        /// Override the grid suite's timestep budget.
        #[arg(long, default_value_t = bench::GRID_TIMESTEPS)]
        grid_timesteps: u64,
    },
}

fn resolve_run(
    run: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    config: &ConfigArgs,
) -> Result<(TrainConfig, PathBuf, PathBuf), CommandError> {
    if let Some(dir) = run {
        let (mut cfg, mut ckpt) = commands::load_run(dir)?;
        if config.config.is_some() || !config.set.is_empty() {
            cfg = config.resolve()?;
        }
        if let Some(c) = checkpoint {
            ckpt = c.clone();
        }
        let out = config.out.clone().unwrap_or_else(|| dir.clone());
        Ok((cfg, ckpt, out))
    } else {
        let cfg = config.resolve()?;
        let ckpt = checkpoint
            .clone()
            .ok_or_else(|| CommandError::MissingCheckpoint(PathBuf::from("<none given>")))?;
        let out = config.out.clone().unwrap_or_else(|| PathBuf::from("runs/eval"));
        Ok((cfg, ckpt, out))
    }
}

fn run() -> Result<(), Box<dyn std::error::Error>> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let summary = commands::cmd_train(cfg)?;
            println!(
                "trained {} timesteps over {} episodes ({} gradient steps)",
                summary.env_steps, summary.episodes, summary.grad_steps
            );
            println!(
                "final greedy eval: mean {} median {}",
                summary.final_eval.mean, summary.final_eval.median
            );
            println!("metrics: {}", summary.metrics_path.display());
            println!("checkpoint: {}", summary.checkpoint_path.display());
        }
        Command::Eval {
            run,
            checkpoint,
            config,
        } => {
            let (cfg, ckpt, out) = resolve_run(&run, &checkpoint, &config)?;
            let stats = commands::cmd_eval(cfg, &ckpt, &out)?;
            println!(
                "return_mean,return_median,return_p25,return_p75\n{},{},{},{}",
                stats.mean, stats.median, stats.p25, stats.p75
            );
        }
        Command::DumpLatents {
            run,
            checkpoint,
            config,
        } => {
            let (cfg, ckpt, out) = resolve_run(&run, &checkpoint, &config)?;
            let (latents, states) = commands::cmd_dump_latents(cfg, &ckpt, &out)?;
            println!("latents: {}", latents.display());
            println!("true states: {}", states.display());
        }
        Command::Bench {
            suite,
            jobs,
            out,
            two_step_timesteps,
            grid_timesteps,
        } => {
            let two_step = if suite == "two_step" || suite == "all" {
                Some(bench::bench_two_step(&out, jobs, two_step_timesteps)?)
            } else {
                None
            };
            let grid = if suite == "grid" || suite == "all" {
                Some(bench::bench_grid(&out, jobs, grid_timesteps)?)
            } else {
                None
            };
            let path = bench::write_summary(&out, two_step.as_ref(), grid.as_ref())?;
            println!("summary: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
