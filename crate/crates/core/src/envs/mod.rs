//! Dec-POMDP environments: shared scalar reward, per-agent local
//! observations, hidden global state.
//!
//! `true_state` on [`StepResult`] is a debug/oracle channel: it feeds the
//! QMIX-with-true-state baseline and latent-dump tooling, never the partially
//! observable algorithms.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

mod grid;
mod oracle;
mod two_step;

pub use grid::{GridLayout, HiddenTreasureGrid, HiddenTreasureGridSpec, ACT_NOOP, N_ACTIONS};
pub use oracle::{oracle_optimal_return, OracleError, DEFAULT_ORACLE_BUDGET};
pub use two_step::{TwoStepGame, TwoStepGameSpec};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("agent {agent} chose unavailable action {action}")]
    UnavailableAction { agent: usize, action: usize },
    #[error("episode already terminated; reset required")]
    Terminated,
    #[error("expected {expected} actions, got {got}")]
    WrongActionCount { expected: usize, got: usize },
    #[error("unknown environment '{0}'")]
    UnknownEnv(String),
}

/// Static dimensions of an environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub episode_limit: usize,
}

/// Outcome of a reset or step.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Per-agent local observations, `n_agents` rows of `obs_dim`.
    pub observations: Vec<Vec<f64>>,
    /// Shared scalar reward (zero on reset).
    pub reward: f64,
    pub terminated: bool,
    pub alive_mask: Vec<bool>,
    /// Per-agent action availability; dead agents have only the no-op
    /// (index 0) available.
    pub avail_actions: Vec<Vec<bool>>,
    /// Debug/oracle channel: the true global state.
    pub true_state: Vec<f64>,
}

pub trait Environment {
    fn spec(&self) -> EnvSpec;
    /// Deterministic function of the seed.
    fn reset(&mut self, seed: u64) -> StepResult;
    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult, EnvError>;
}

/// Construct a built-in environment by name.
pub fn make_env(name: &str, grid: &HiddenTreasureGridSpec) -> Result<Box<dyn Environment>, EnvError> {
    match name {
        "two_step" => Ok(Box::new(TwoStepGame::new(TwoStepGameSpec::default()))),
        "treasure_grid" => Ok(Box::new(HiddenTreasureGrid::new(grid.clone()))),
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}

pub(crate) fn check_actions(
    spec: &EnvSpec,
    avail: &[Vec<bool>],
    joint_action: &[usize],
) -> Result<(), EnvError> {
    if joint_action.len() != spec.n_agents {
        return Err(EnvError::WrongActionCount {
            expected: spec.n_agents,
            got: joint_action.len(),
        });
    }
    for (agent, &a) in joint_action.iter().enumerate() {
        if a >= spec.n_actions || !avail[agent][a] {
            return Err(EnvError::UnavailableAction { agent, action: a });
        }
    }
    Ok(())
}

/// One recorded step of an episode, for CSV export.
#[derive(Debug, Clone)]
pub struct RecordedStep {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub alive: Vec<bool>,
}

/// Export recorded episodes as CSV: one row per `(episode, t, agent)` with
/// observation, action, reward and alive flag.
pub fn export_episodes_csv(path: &Path, episodes: &[Vec<RecordedStep>]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let obs_dim = episodes
        .iter()
        .flat_map(|e| e.iter())
        .map(|s| s.observations[0].len())
        .next()
        .unwrap_or(0);
    write!(w, "episode,t,agent")?;
    for i in 0..obs_dim {
        write!(w, ",obs_{i}")?;
    }
    writeln!(w, ",action,reward,alive")?;
    for (ep, steps) in episodes.iter().enumerate() {
        for (t, s) in steps.iter().enumerate() {
            for (agent, obs) in s.observations.iter().enumerate() {
                write!(w, "{ep},{t},{agent}")?;
                for x in obs {
                    write!(w, ",{x}")?;
                }
                writeln!(w, ",{},{},{}", s.actions[agent], s.reward, s.alive[agent] as u8)?;
            }
        }
    }
    w.flush()
}
