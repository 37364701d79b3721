//! Episode replay, batched loss assembly and the outer training loop.

use std::collections::VecDeque;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

mod losses;
mod models;
mod trainer;

pub use losses::{
    compute_losses, elbo_report, masked_mean_rows, ElboReport, FrozenTargets, LossReport,
    LossValues, StepNoise,
};
pub use models::ModelSet;
pub use trainer::{obs_matrix, percentile, EvalStats, RngSet, RunSummary, Trainer, TrainerError};

/// One complete recorded episode (unpadded).
#[derive(Debug, Clone)]
pub struct Episode {
    /// Observation rows at each step, `[n, obs_dim]` (input to the agents).
    pub obs: Vec<Array2<f64>>,
    /// Joint action taken at each step.
    pub actions: Vec<Vec<usize>>,
    /// Availability masks in effect at each step.
    pub avail: Vec<Vec<Vec<bool>>>,
    /// Aliveness at each step.
    pub alive: Vec<Vec<bool>>,
    pub rewards: Vec<f64>,
    /// Termination flag observed after each step.
    pub terminated: Vec<bool>,
    /// Debug-channel global state at each step.
    pub true_states: Vec<Vec<f64>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Ring buffer of whole episodes with FIFO eviction.
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
        }
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn get(&self, i: usize) -> &Episode {
        &self.episodes[i]
    }

    /// Uniform sample of `count` distinct episodes.
    pub fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<&Episode> {
        let idx = rand::seq::index::sample(rng, self.episodes.len(), count);
        idx.iter().map(|i| &self.episodes[i]).collect()
    }
}

/// Padded batch of `B` episodes. Per-timestep tensors are row-batched with
/// rows ordered (episode-major, agent-minor); the fill mask is 1 up to each
/// episode's length and every loss is a masked mean over filled steps.
pub struct EpisodeBatch {
    pub b: usize,
    pub t_max: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    /// Per `t`: `[B*n, obs_dim]`.
    pub obs: Vec<Array2<f64>>,
    /// Per `t`: action index per row (`B*n`).
    pub actions: Vec<Vec<usize>>,
    /// Per `t`: previous action per row (`None` at episode start).
    pub last_actions: Vec<Vec<Option<usize>>>,
    /// Per `t`: `[B*n]` row-major availability.
    pub avail: Vec<Vec<Vec<bool>>>,
    /// Per `t`: one aliveness mask per episode.
    pub alive: Vec<Vec<Vec<bool>>>,
    /// `[B, t_max]`.
    pub rewards: Array2<f64>,
    /// `[B, t_max]` (1.0 where the step terminated the episode).
    pub terminated: Array2<f64>,
    /// `[B, t_max]` fill mask.
    pub filled: Array2<f64>,
    /// Per `t`: `[B, state_dim]` debug-channel states (zeros on padding).
    pub true_states: Vec<Array2<f64>>,
}

impl EpisodeBatch {
    pub fn from_episodes(
        episodes: &[&Episode],
        n_agents: usize,
        n_actions: usize,
        obs_dim: usize,
        state_dim: usize,
    ) -> Self {
        let b = episodes.len();
        let t_max = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        let mut obs = Vec::with_capacity(t_max);
        let mut actions = Vec::with_capacity(t_max);
        let mut last_actions = Vec::with_capacity(t_max);
        let mut avail = Vec::with_capacity(t_max);
        let mut alive = Vec::with_capacity(t_max);
        let mut true_states = Vec::with_capacity(t_max);
        let mut rewards = Array2::zeros((b, t_max));
        let mut terminated = Array2::zeros((b, t_max));
        let mut filled = Array2::zeros((b, t_max));

        for t in 0..t_max {
            let mut obs_t = Array2::zeros((b * n_agents, obs_dim));
            let mut act_t = vec![0usize; b * n_agents];
            let mut last_t = vec![None; b * n_agents];
            let mut avail_t = vec![vec![true; n_actions]; b * n_agents];
            let mut alive_t = vec![vec![true; n_agents]; b];
            let mut state_t = Array2::zeros((b, state_dim));
            for (e, ep) in episodes.iter().enumerate() {
                if t >= ep.len() {
                    // padding: keep benign defaults; the fill mask excludes
                    // these rows from every loss
                    continue;
                }
                filled[[e, t]] = 1.0;
                rewards[[e, t]] = ep.rewards[t];
                terminated[[e, t]] = if ep.terminated[t] { 1.0 } else { 0.0 };
                for a in 0..n_agents {
                    let row = e * n_agents + a;
                    for j in 0..obs_dim {
                        obs_t[[row, j]] = ep.obs[t][[a, j]];
                    }
                    act_t[row] = ep.actions[t][a];
                    last_t[row] = if t == 0 {
                        None
                    } else {
                        Some(ep.actions[t - 1][a])
                    };
                    avail_t[row] = ep.avail[t][a].clone();
                }
                alive_t[e] = ep.alive[t].clone();
                for j in 0..state_dim {
                    state_t[[e, j]] = ep.true_states[t][j];
                }
            }
            obs.push(obs_t);
            actions.push(act_t);
            last_actions.push(last_t);
            avail.push(avail_t);
            alive.push(alive_t);
            true_states.push(state_t);
        }

        Self {
            b,
            t_max,
            n_agents,
            n_actions,
            obs_dim,
            state_dim,
            obs,
            actions,
            last_actions,
            avail,
            alive,
            rewards,
            terminated,
            filled,
            true_states,
        }
    }

    /// Total filled steps (the masked-mean denominator).
    pub fn filled_count(&self) -> f64 {
        self.filled.sum()
    }

    /// Fill mask as a `[t_max*B, 1]` column in t-major order.
    pub fn fill_column(&self) -> Array2<f64> {
        let mut col = Array2::zeros((self.t_max * self.b, 1));
        for t in 0..self.t_max {
            for e in 0..self.b {
                col[[t * self.b + e, 0]] = self.filled[[e, t]];
            }
        }
        col
    }
}
