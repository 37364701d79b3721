//! The outer training loop: alternate one rollout episode with one gradient
//! step on a sampled batch, sync targets on an episode cadence, evaluate the
//! greedy policy on a timestep cadence.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::agents::{select_action, EpsilonSchedule};
use crate::autodiff::{
    read_checkpoint, write_checkpoint, AdError, Checkpoint, RmsProp, Value, OPT_PREFIX,
};
use crate::config::TrainConfig;
use crate::envs::{make_env, EnvError, Environment, StepResult};
use crate::training::{
    compute_losses, Episode, EpisodeBatch, LossReport, ModelSet, ReplayBuffer, StepNoise,
};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("agent error: {0}")]
    Agent(#[from] crate::agents::AgentError),
    #[error("non-finite loss at gradient step {step}: {report:?}")]
    NonFinite { step: u64, report: LossReport },
}

/// Independent deterministic random streams, all derived from the master
/// seed in a fixed order: init, env seeds, action selection, sampling
/// noise, batch sampling, eval env seeds.
pub struct RngSet {
    pub env_seeds: ChaCha8Rng,
    pub actions: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub sampling: ChaCha8Rng,
    pub eval_env_seeds: ChaCha8Rng,
}

impl RngSet {
    pub fn from_master(seed: u64) -> (ChaCha8Rng, RngSet) {
        let mut root = ChaCha8Rng::seed_from_u64(seed);
        let mut derive = || ChaCha8Rng::seed_from_u64(root.random::<u64>());
        let init = derive();
        let env_seeds = derive();
        let actions = derive();
        let noise = derive();
        let sampling = derive();
        let eval_env_seeds = derive();
        (
            init,
            RngSet {
                env_seeds,
                actions,
                noise,
                sampling,
                eval_env_seeds,
            },
        )
    }
}

/// Greedy-policy evaluation statistics over a set of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub returns: Vec<f64>,
}

impl EvalStats {
    pub fn from_returns(mut returns: Vec<f64>) -> Self {
        returns.sort_by(|a, b| a.partial_cmp(b).expect("finite returns"));
        let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
        Self {
            median: percentile(&returns, 0.5),
            p25: percentile(&returns, 0.25),
            p75: percentile(&returns, 0.75),
            mean,
            returns,
        }
    }
}

/// Linear-interpolation percentile of a sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub evals: Vec<(u64, EvalStats)>,
    pub final_eval: EvalStats,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub env_steps: u64,
    pub episodes: u64,
    pub grad_steps: u64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: ModelSet,
    pub opt: RmsProp,
    pub buffer: ReplayBuffer,
    pub rngs: RngSet,
    pub schedule: EpsilonSchedule,
    pub env_steps: u64,
    pub episodes: u64,
    pub grad_steps: u64,
    pub syncs: u64,
    env: Box<dyn Environment>,
    eval_env: Box<dyn Environment>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainerError> {
        let grid = cfg.grid_spec();
        let env = make_env(&cfg.env, &grid)?;
        let eval_env = make_env(&cfg.env, &grid)?;
        let spec = env.spec();
        let (mut init_rng, rngs) = RngSet::from_master(cfg.seed);
        let models = ModelSet::new(&cfg, &spec, &mut init_rng)?;
        let opt = RmsProp::new(cfg.lr, cfg.rmsprop_alpha, cfg.rmsprop_eps, cfg.grad_clip);
        let schedule = EpsilonSchedule {
            start: cfg.epsilon_start,
            end: cfg.epsilon_end,
            anneal_steps: cfg.epsilon_anneal_steps,
        };
        let buffer = ReplayBuffer::new(cfg.buffer_capacity);
        Ok(Self {
            cfg,
            models,
            opt,
            buffer,
            rngs,
            schedule,
            env_steps: 0,
            episodes: 0,
            grad_steps: 0,
            syncs: 0,
            env,
            eval_env,
        })
    }

    /// One exploratory episode appended to nothing; the caller owns it.
    /// Advances the global timestep counter.
    pub fn rollout_episode(&mut self) -> Result<Episode, TrainerError> {
        let seed = self.rngs.env_seeds.random::<u64>();
        let spec = self.env.spec();
        let mut result = self.env.reset(seed);
        let mut episode = empty_episode();
        let mut h = Value::constant(ArrayD::zeros(IxDyn(&[spec.n_agents, self.cfg.rnn_hidden])));
        let mut last_actions: Vec<Option<usize>> = vec![None; spec.n_agents];
        loop {
            let obs = obs_matrix(&result);
            let x = Value::constant(
                self.models
                    .agent
                    .build_input_rows(&obs, &last_actions),
            );
            let (q, h_new) = self.models.agent.forward_rows(&x, &h)?;
            h = h_new;
            let qd = q.data_clone();
            let epsilon = self.schedule.value(self.env_steps);
            let mut joint = Vec::with_capacity(spec.n_agents);
            for a in 0..spec.n_agents {
                let row: Vec<f64> = (0..spec.n_actions).map(|j| qd[[a, j]]).collect();
                joint.push(select_action(
                    &row,
                    &result.avail_actions[a],
                    epsilon,
                    &mut self.rngs.actions,
                )?);
            }
            let pre = result.clone();
            result = self.env.step(&joint)?;
            self.env_steps += 1;
            record_step(&mut episode, &pre, &joint, &result);
            for (a, &u) in joint.iter().enumerate() {
                last_actions[a] = Some(u);
            }
            if result.terminated {
                break;
            }
        }
        Ok(episode)
    }

    /// Greedy-policy episodes on the evaluation environment. Consumes only
    /// the eval seed stream; the timestep counter is untouched.
    pub fn evaluate(&mut self) -> Result<EvalStats, TrainerError> {
        let spec = self.eval_env.spec();
        let mut returns = Vec::with_capacity(self.cfg.eval_episodes);
        for _ in 0..self.cfg.eval_episodes {
            let seed = self.rngs.eval_env_seeds.random::<u64>();
            let mut result = self.eval_env.reset(seed);
            let mut h =
                Value::constant(ArrayD::zeros(IxDyn(&[spec.n_agents, self.cfg.rnn_hidden])));
            let mut last_actions: Vec<Option<usize>> = vec![None; spec.n_agents];
            let mut ret = 0.0;
            loop {
                let obs = obs_matrix(&result);
                let x = Value::constant(
                    self.models
                        .agent
                        .build_input_rows(&obs, &last_actions),
                );
                let (q, h_new) = self.models.agent.forward_rows(&x, &h)?;
                h = h_new;
                let qd = q.data_clone();
                let mut joint = Vec::with_capacity(spec.n_agents);
                for a in 0..spec.n_agents {
                    let row: Vec<f64> = (0..spec.n_actions).map(|j| qd[[a, j]]).collect();
                    joint.push(select_action(
                        &row,
                        &result.avail_actions[a],
                        0.0,
                        &mut self.rngs.actions,
                    )?);
                }
                result = self.eval_env.step(&joint)?;
                ret += result.reward;
                for (a, &u) in joint.iter().enumerate() {
                    last_actions[a] = Some(u);
                }
                if result.terminated {
                    break;
                }
            }
            returns.push(ret);
        }
        Ok(EvalStats::from_returns(returns))
    }

    /// Standard-normal noise arrays for one gradient step (latent algorithm
    /// only), drawn in a fixed order: auto-encoder first, prior second.
    pub fn draw_noise(&mut self, batch: &EpisodeBatch) -> StepNoise {
        if !self.models.algorithm.uses_side_losses() {
            return StepNoise::none();
        }
        let samples = batch.t_max * batch.b;
        let n = batch.n_agents;
        let latent = self.cfg.latent_dim;
        let vgae = ArrayD::from_shape_fn(IxDyn(&[samples * n, latent]), |_| {
            self.rngs.noise.sample::<f64, _>(StandardNormal)
        });
        let prior = ArrayD::from_shape_fn(IxDyn(&[samples, n * latent]), |_| {
            self.rngs.noise.sample::<f64, _>(StandardNormal)
        });
        StepNoise {
            vgae: Some(vgae),
            prior: Some(prior),
        }
    }

    /// One gradient step on a uniformly sampled batch.
    pub fn train_step(&mut self) -> Result<LossReport, TrainerError> {
        let spec = self.env.spec();
        let sampled = self.buffer.sample(self.cfg.batch_size, &mut self.rngs.sampling);
        let batch = EpisodeBatch::from_episodes(
            &sampled,
            spec.n_agents,
            spec.n_actions,
            spec.obs_dim,
            spec.state_dim,
        );
        let noise = self.draw_noise(&batch);
        let (losses, _) = compute_losses(&self.models, &batch, self.cfg.gamma, &noise, None)?;
        let report = losses.report();
        if !report.all_finite() {
            return Err(TrainerError::NonFinite {
                step: self.grad_steps,
                report,
            });
        }
        losses.total.backward()?;
        self.opt.step(&self.models.online)?;
        self.grad_steps += 1;
        Ok(report)
    }

    pub fn sync_targets(&mut self) -> Result<(), TrainerError> {
        self.models.sync_target()?;
        self.syncs += 1;
        Ok(())
    }

    /// Full training run with metrics, checkpoints and a manifest.
    pub fn run(&mut self) -> Result<RunSummary, TrainerError> {
        std::fs::create_dir_all(&self.cfg.out)?;
        let metrics_path = self.cfg.out.join("metrics.csv");
        let checkpoint_path = self.cfg.out.join("checkpoint_final.bin");
        let manifest_path = self.cfg.out.join("manifest.txt");
        std::fs::write(self.cfg.out.join("config.resolved"), self.cfg.to_text())?;
        write_manifest(&manifest_path, &self.cfg, "incomplete", None, None)?;
        let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
        writeln!(
            metrics,
            "timestep,episode,eval_return_mean,eval_return_median,td_loss,kl_prior,recon_prior,kl,recon,total_loss,epsilon"
        )?;
        let start = SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_secs();
        let mut evals = Vec::new();
        let mut next_eval = 0u64;

        while self.env_steps < self.cfg.total_timesteps {
            while self.env_steps >= next_eval {
                let stats = self.evaluate()?;
                self.write_eval_row(&mut metrics, &stats)?;
                self.save_checkpoint(&self.cfg.out.join("checkpoint_latest.bin"))?;
                evals.push((self.env_steps, stats));
                next_eval += self.cfg.eval_interval;
            }
            let episode = self.rollout_episode()?;
            self.episodes += 1;
            self.buffer.push(episode);
            if self.buffer.len() >= self.cfg.batch_size {
                let report = self.train_step()?;
                self.write_loss_row(&mut metrics, &report)?;
            }
            if self.episodes % self.cfg.target_update_episodes == 0 {
                self.sync_targets()?;
            }
        }
        while self.env_steps >= next_eval {
            let stats = self.evaluate()?;
            self.write_eval_row(&mut metrics, &stats)?;
            evals.push((self.env_steps, stats));
            next_eval += self.cfg.eval_interval;
        }
        if evals.last().map(|(t, _)| *t) != Some(self.env_steps) {
            let stats = self.evaluate()?;
            self.write_eval_row(&mut metrics, &stats)?;
            evals.push((self.env_steps, stats));
        }
        metrics.flush()?;
        self.save_checkpoint(&checkpoint_path)?;
        let end = SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_secs();
        write_manifest(
            &manifest_path,
            &self.cfg,
            "complete",
            Some((start, end)),
            Some(&checkpoint_path),
        )?;
        let final_eval = evals.last().map(|(_, s)| s.clone()).expect("at least one eval");
        Ok(RunSummary {
            evals,
            final_eval,
            metrics_path,
            checkpoint_path,
            env_steps: self.env_steps,
            episodes: self.episodes,
            grad_steps: self.grad_steps,
        })
    }

    fn write_eval_row(
        &self,
        w: &mut impl Write,
        stats: &EvalStats,
    ) -> Result<(), TrainerError> {
        writeln!(
            w,
            "{},{},{},{},,,,,,,{}",
            self.env_steps,
            self.episodes,
            stats.mean,
            stats.median,
            self.schedule.value(self.env_steps)
        )?;
        Ok(())
    }

    fn write_loss_row(&self, w: &mut impl Write, r: &LossReport) -> Result<(), TrainerError> {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},,,{},{},{},{},{},{},{}",
            self.env_steps,
            self.episodes,
            r.td,
            opt(&r.kl_prior),
            opt(&r.recon_prior),
            opt(&r.kl),
            opt(&r.recon),
            r.total,
            self.schedule.value(self.env_steps)
        )?;
        Ok(())
    }

    /// Flat binary checkpoint: online parameters, target parameters under
    /// `target/`, optimizer accumulators under the reserved prefix.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainerError> {
        let mut ckpt = Checkpoint::default();
        for (name, value, _) in self.models.online.iter() {
            ckpt.push(name, value.data_clone());
        }
        for (name, value, _) in self.models.target.iter() {
            ckpt.push(format!("target/{name}"), value.data_clone());
        }
        for (name, acc) in self.opt.state.accumulators() {
            ckpt.push(format!("{OPT_PREFIX}{name}"), acc.clone());
        }
        write_checkpoint(path, &ckpt)?;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), TrainerError> {
        let ckpt = read_checkpoint(path)?;
        let mut online = Vec::new();
        let mut target = Vec::new();
        for (name, arr) in &ckpt.entries {
            if let Some(rest) = name.strip_prefix(OPT_PREFIX) {
                self.opt.state.set_accumulator(rest, arr.clone());
            } else if let Some(rest) = name.strip_prefix("target/") {
                target.push((rest.to_string(), arr.clone()));
            } else {
                online.push((name.clone(), arr.clone()));
            }
        }
        self.models.online.restore(&online)?;
        self.models.target.restore(&target)?;
        Ok(())
    }
}

fn empty_episode() -> Episode {
    Episode {
        obs: Vec::new(),
        actions: Vec::new(),
        avail: Vec::new(),
        alive: Vec::new(),
        rewards: Vec::new(),
        terminated: Vec::new(),
        true_states: Vec::new(),
    }
}

/// Observation rows of one step result as an `[n, obs_dim]` matrix.
pub fn obs_matrix(result: &StepResult) -> Array2<f64> {
    let n = result.observations.len();
    let d = result.observations[0].len();
    Array2::from_shape_fn((n, d), |(a, j)| result.observations[a][j])
}

fn record_step(episode: &mut Episode, pre: &StepResult, joint: &[usize], post: &StepResult) {
    episode.obs.push(obs_matrix(pre));
    episode.actions.push(joint.to_vec());
    episode.avail.push(pre.avail_actions.clone());
    episode.alive.push(pre.alive_mask.clone());
    episode.rewards.push(post.reward);
    episode.terminated.push(post.terminated);
    episode.true_states.push(pre.true_state.clone());
}

fn write_manifest(
    path: &Path,
    cfg: &TrainConfig,
    status: &str,
    times: Option<(u64, u64)>,
    checkpoint: Option<&Path>,
) -> std::io::Result<()> {
    let mut text = String::new();
    text.push_str(&format!("status = {status}\n"));
    text.push_str(&format!("code_version = {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("seed = {}\n", cfg.seed));
    if let Some((start, end)) = times {
        text.push_str(&format!("start_unix = {start}\nend_unix = {end}\n"));
    } else {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_secs();
        text.push_str(&format!("start_unix = {now}\n"));
    }
    if let Some(ckpt) = checkpoint {
        text.push_str(&format!("checkpoint = {}\n", ckpt.display()));
    }
    text.push_str("config_snapshot = config.resolved\n");
    std::fs::write(path, text)
}
