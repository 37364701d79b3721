//! Run management behind the CLI subcommands: training runs, greedy
//! evaluation of a checkpoint, latent-state dumps, and the scripted
//! benchmark comparisons.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::agents::{greedy_action, AgentHiddenSet, HiddenSource};
use crate::autodiff::Value;
use crate::config::{ConfigError, TrainConfig};
use crate::envs::{make_env, RecordedStep};
use crate::training::{EvalStats, RunSummary, Trainer, TrainerError};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("missing resolved config: {0}")]
    MissingConfig(PathBuf),
    #[error("dump-latents requires a run trained with the 'side' algorithm, got '{0}'")]
    NoLatentModel(String),
}

/// Train per config; returns the run summary.
pub fn cmd_train(cfg: TrainConfig) -> Result<RunSummary, CommandError> {
    let mut trainer = Trainer::new(cfg)?;
    Ok(trainer.run()?)
}

/// Locate `config.resolved` and the final checkpoint inside a run
/// directory.
pub fn load_run(run_dir: &Path) -> Result<(TrainConfig, PathBuf), CommandError> {
    let cfg_path = run_dir.join("config.resolved");
    if !cfg_path.exists() {
        return Err(CommandError::MissingConfig(cfg_path));
    }
    let cfg = TrainConfig::load(&cfg_path, &[])?;
    let ckpt = run_dir.join("checkpoint_final.bin");
    let ckpt = if ckpt.exists() {
        ckpt
    } else {
        let latest = run_dir.join("checkpoint_latest.bin");
        if latest.exists() {
            latest
        } else {
            return Err(CommandError::MissingCheckpoint(ckpt));
        }
    };
    Ok((cfg, ckpt))
}

/// Greedy evaluation of a checkpoint: one summary row with four statistics,
/// plus a per-episode recording CSV.
pub fn cmd_eval(
    cfg: TrainConfig,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<EvalStats, CommandError> {
    if !checkpoint.exists() {
        return Err(CommandError::MissingCheckpoint(checkpoint.to_path_buf()));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.load_checkpoint(checkpoint)?;
    std::fs::create_dir_all(out_dir)?;

    // greedy episodes with recordings
    let grid = cfg.grid_spec();
    let mut env = make_env(&cfg.env, &grid)?;
    let spec = env.spec();
    let mut returns = Vec::with_capacity(cfg.eval_episodes);
    let mut recordings = Vec::with_capacity(cfg.eval_episodes);
    for ep in 0..cfg.eval_episodes {
        let mut result = env.reset(ep as u64);
        let mut h = Value::constant(ArrayD::zeros(IxDyn(&[spec.n_agents, cfg.rnn_hidden])));
        let mut last: Vec<Option<usize>> = vec![None; spec.n_agents];
        let mut ret = 0.0;
        let mut steps = Vec::new();
        loop {
            let obs = crate::training::obs_matrix(&result);
            let x = Value::constant(trainer.models.agent.build_input_rows(&obs, &last));
            let (q, h_new) = trainer.models.agent.forward_rows(&x, &h).map_err(TrainerError::Ad)?;
            h = h_new;
            let qd = q.data_clone();
            let mut joint = Vec::with_capacity(spec.n_agents);
            for a in 0..spec.n_agents {
                let row: Vec<f64> = (0..spec.n_actions).map(|j| qd[[a, j]]).collect();
                joint.push(
                    greedy_action(&row, &result.avail_actions[a])
                        .expect("environments always leave an action available"),
                );
            }
            let pre = result.clone();
            result = env.step(&joint).map_err(TrainerError::Env)?;
            ret += result.reward;
            steps.push(RecordedStep {
                observations: pre.observations.clone(),
                actions: joint.clone(),
                reward: result.reward,
                alive: pre.alive_mask.clone(),
            });
            for (a, &u) in joint.iter().enumerate() {
                last[a] = Some(u);
            }
            if result.terminated {
                break;
            }
        }
        returns.push(ret);
        recordings.push(steps);
    }
    let stats = EvalStats::from_returns(returns);
    let mut w = std::io::BufWriter::new(std::fs::File::create(out_dir.join("eval_summary.csv"))?);
    writeln!(w, "return_mean,return_median,return_p25,return_p75")?;
    writeln!(w, "{},{},{},{}", stats.mean, stats.median, stats.p25, stats.p75)?;
    w.flush()?;
    crate::envs::export_episodes_csv(&out_dir.join("eval_episodes.csv"), &recordings)?;
    Ok(stats)
}

/// Greedy episodes through the latent-state model: one CSV row per
/// (episode, t) with the inferred latent vector and the discounted
/// return-to-go, plus a parallel true-state CSV from the debug channel.
pub fn cmd_dump_latents(
    cfg: TrainConfig,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), CommandError> {
    if !checkpoint.exists() {
        return Err(CommandError::MissingCheckpoint(checkpoint.to_path_buf()));
    }
    if !cfg.algorithm.uses_side_losses() {
        return Err(CommandError::NoLatentModel(cfg.algorithm.name().to_string()));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.load_checkpoint(checkpoint)?;
    std::fs::create_dir_all(out_dir)?;
    let vgae = trainer
        .models
        .vgae
        .as_ref()
        .ok_or_else(|| CommandError::NoLatentModel(cfg.algorithm.name().to_string()))?;
    let grid = cfg.grid_spec();
    let mut env = make_env(&cfg.env, &grid)?;
    let spec = env.spec();
    let full = spec.n_agents * cfg.latent_dim;

    let latents_path = out_dir.join("latents.csv");
    let states_path = out_dir.join("true_states.csv");
    let mut lw = std::io::BufWriter::new(std::fs::File::create(&latents_path)?);
    write!(lw, "episode,t")?;
    for i in 0..full {
        write!(lw, ",s_{i}")?;
    }
    writeln!(lw, ",return_to_go")?;
    let mut sw = std::io::BufWriter::new(std::fs::File::create(&states_path)?);
    write!(sw, "episode,t")?;
    for i in 0..spec.state_dim {
        write!(sw, ",state_{i}")?;
    }
    writeln!(sw)?;

    for ep in 0..cfg.dump_episodes {
        let mut result = env.reset(ep as u64);
        // online nets drive the greedy policy; target nets feed inference
        let mut h_online =
            Value::constant(ArrayD::zeros(IxDyn(&[spec.n_agents, cfg.rnn_hidden])));
        let mut h_target =
            Value::constant(ArrayD::zeros(IxDyn(&[spec.n_agents, cfg.rnn_hidden])));
        let mut last: Vec<Option<usize>> = vec![None; spec.n_agents];
        let mut rows: Vec<(Vec<f64>, Vec<f64>)> = Vec::new(); // (latent, true_state)
        let mut rewards = Vec::new();
        loop {
            let obs = crate::training::obs_matrix(&result);
            let x = Value::constant(trainer.models.agent.build_input_rows(&obs, &last));
            let (q, h_new) = trainer.models.agent.forward_rows(&x, &h_online).map_err(TrainerError::Ad)?;
            h_online = h_new;
            let (_qt, ht_new) = trainer
                .models
                .agent_target
                .forward_rows(&x, &h_target)
                .map_err(TrainerError::Ad)?;
            h_target = ht_new;
            let hidden = AgentHiddenSet::new(
                h_target.data_clone(),
                spec.n_agents,
                HiddenSource::Target,
            );
            let (latent, _) = vgae
                .infer_one(&hidden, &result.alive_mask)
                .expect("target-sourced hidden set");
            rows.push((latent.s_tilde.clone(), result.true_state.clone()));

            let qd = q.data_clone();
            let mut joint = Vec::with_capacity(spec.n_agents);
            for a in 0..spec.n_agents {
                let row: Vec<f64> = (0..spec.n_actions).map(|j| qd[[a, j]]).collect();
                joint.push(
                    greedy_action(&row, &result.avail_actions[a])
                        .expect("environments always leave an action available"),
                );
            }
            result = env.step(&joint).map_err(TrainerError::Env)?;
            rewards.push(result.reward);
            for (a, &u) in joint.iter().enumerate() {
                last[a] = Some(u);
            }
            if result.terminated {
                break;
            }
        }
        // discounted return-to-go per step
        let mut rtg = vec![0.0; rewards.len()];
        let mut acc = 0.0;
        for t in (0..rewards.len()).rev() {
            acc = rewards[t] + cfg.gamma * acc;
            rtg[t] = acc;
        }
        for (t, (latent, state)) in rows.iter().enumerate() {
            write!(lw, "{ep},{t}")?;
            for v in latent {
                write!(lw, ",{v}")?;
            }
            writeln!(lw, ",{}", rtg[t])?;
            write!(sw, "{ep},{t}")?;
            for v in state {
                write!(sw, ",{v}")?;
            }
            writeln!(sw)?;
        }
    }
    lw.flush()?;
    sw.flush()?;
    Ok((latents_path, states_path))
}
