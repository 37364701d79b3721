//! Recurrent Q-agents (DRQN) with parameter sharing across agents.
//!
//! One network serves all agents: the input is the local observation plus
//! the last-action one-hot and an agent-identity one-hot, so the parameter
//! count is independent of the team size. The recurrent hidden output `h`
//! doubles as the integration of the agent's action-observation history and
//! is what the state-inference stack consumes.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdResult, Arr, ParameterSet, Value};
use crate::nn::{GruCell, Linear};

pub const RNN_HIDDEN: usize = 64;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no available action to select")]
    NoAvailableAction,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Which networks produced a set of hidden outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenSource {
    Online,
    Target,
}

/// Row-batched recurrent hidden outputs: one row per (sample, agent).
pub struct AgentHiddenSet {
    pub data: Arr,
    pub n_agents: usize,
    pub source: HiddenSource,
}

impl AgentHiddenSet {
    pub fn new(data: Arr, n_agents: usize, source: HiddenSource) -> Self {
        Self {
            data,
            n_agents,
            source,
        }
    }
}

/// Shared DRQN: input embedding -> GRU cell -> Q head.
pub struct AgentNetwork {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    pub hidden: usize,
    pub embed: Linear,
    pub gru: GruCell,
    pub head: Linear,
}

impl AgentNetwork {
    pub fn new(
        ps: &mut ParameterSet,
        obs_dim: usize,
        n_actions: usize,
        n_agents: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> AdResult<Self> {
        let in_dim = obs_dim + n_actions + n_agents;
        let embed = Linear::new(ps, "agent/embed", in_dim, hidden, rng)?;
        let gru = GruCell::new(ps, "agent/gru", hidden, hidden, rng)?;
        let head = Linear::new(ps, "agent/head", hidden, n_actions, rng)?;
        Ok(Self {
            obs_dim,
            n_actions,
            n_agents,
            hidden,
            embed,
            gru,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }

    /// One recurrent step over row-batched inputs.
    /// `x`: `[rows, obs_dim + n_actions + n_agents]`, `h_prev`: `[rows, hidden]`.
    pub fn forward_rows(&self, x: &Value, h_prev: &Value) -> AdResult<(Value, Value)> {
        let e = self.embed.forward(x)?.relu();
        let h = self.gru.step(&e, h_prev)?;
        let q = self.head.forward(&h)?;
        Ok((q, h))
    }

    /// Single-agent step: observation, last-action one-hot, identity one-hot,
    /// previous hidden state (zeros at episode start).
    pub fn agent_forward(
        &self,
        obs: &[f64],
        last_action: &[f64],
        agent_id: &[f64],
        h_prev: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
        let expected = self.input_dim();
        let got = obs.len() + last_action.len() + agent_id.len();
        if got != expected || h_prev.len() != self.hidden {
            return Err(AgentError::DimMismatch { expected, got });
        }
        let mut row = Vec::with_capacity(expected);
        row.extend_from_slice(obs);
        row.extend_from_slice(last_action);
        row.extend_from_slice(agent_id);
        let x = Value::constant(ArrayD::from_shape_vec(IxDyn(&[1, expected]), row).expect("shape"));
        let h = Value::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, self.hidden]), h_prev.to_vec()).expect("shape"),
        );
        let (q, h_new) = self.forward_rows(&x, &h).expect("dims checked");
        Ok((
            q.data_clone().iter().cloned().collect(),
            h_new.data_clone().iter().cloned().collect(),
        ))
    }

    /// Assemble the row-batched input for all agents of a set of samples.
    /// `obs`: `[rows, obs_dim]` with rows ordered (sample-major, agent-minor);
    /// `last_actions`: action index per row taken at the previous step, or
    /// `None` for episode starts (zero vector, no action yet).
    pub fn build_input_rows(
        &self,
        obs: &Array2<f64>,
        last_actions: &[Option<usize>],
    ) -> Arr {
        let rows = obs.nrows();
        debug_assert_eq!(rows % self.n_agents, 0);
        debug_assert_eq!(last_actions.len(), rows);
        let in_dim = self.input_dim();
        let mut x = Array2::<f64>::zeros((rows, in_dim));
        for r in 0..rows {
            for j in 0..self.obs_dim {
                x[[r, j]] = obs[[r, j]];
            }
            if let Some(a) = last_actions[r] {
                x[[r, self.obs_dim + a]] = 1.0;
            }
            let agent = r % self.n_agents;
            x[[r, self.obs_dim + self.n_actions + agent]] = 1.0;
        }
        x.into_dyn()
    }
}

/// Piecewise-linear exploration schedule in environment timesteps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            anneal_steps: 50_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, t: u64) -> f64 {
        if t >= self.anneal_steps {
            return self.end;
        }
        let frac = t as f64 / self.anneal_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Epsilon-greedy over available actions; greedy ties break to the lowest
/// index; unavailable actions are never selected.
pub fn select_action(
    q_values: &[f64],
    avail: &[bool],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize, AgentError> {
    let available: Vec<usize> = avail
        .iter()
        .enumerate()
        .filter(|(_, &a)| a)
        .map(|(i, _)| i)
        .collect();
    if available.is_empty() {
        return Err(AgentError::NoAvailableAction);
    }
    if epsilon > 0.0 && rng.random_range(0.0..1.0) < epsilon {
        return Ok(available[rng.random_range(0..available.len())]);
    }
    Ok(greedy_action(q_values, avail).expect("nonempty checked"))
}

/// Masked argmax with lowest-index tie-breaking.
pub fn greedy_action(q_values: &[f64], avail: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&q, &a)) in q_values.iter().zip(avail.iter()).enumerate() {
        if !a {
            continue;
        }
        match best {
            Some((_, bq)) if q <= bq => {}
            _ => best = Some((i, q)),
        }
    }
    best.map(|(i, _)| i)
}

/// Hard-copy all online parameters into the target set.
pub fn sync_target(online: &ParameterSet, target: &mut ParameterSet) -> AdResult<()> {
    target.copy_from(online)
}
