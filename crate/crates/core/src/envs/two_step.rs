//! Two-agent, two-stage matrix game.
//!
//! At the first step agent 0's action selects which second-stage payoff
//! matrix is played (action 0 -> matrix A, action 1 -> matrix B); agent 1's
//! first action is ignored. The second step pays `matrix[u0][u1]` and
//! terminates. With the default payoffs the optimal return is 8, reachable
//! only through branch B, while any branch-A episode returns 7.

use super::{check_actions, EnvError, Environment, EnvSpec, StepResult};

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepGameSpec {
    pub matrix_a: [[f64; 2]; 2],
    pub matrix_b: [[f64; 2]; 2],
}

impl Default for TwoStepGameSpec {
    fn default() -> Self {
        Self {
            matrix_a: [[7.0, 7.0], [7.0, 7.0]],
            matrix_b: [[0.0, 1.0], [1.0, 8.0]],
        }
    }
}

/// Game stage: initial, second-stage A, second-stage B.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Start,
    BranchA,
    BranchB,
}

impl Stage {
    fn one_hot(self) -> Vec<f64> {
        match self {
            Stage::Start => vec![1.0, 0.0, 0.0],
            Stage::BranchA => vec![0.0, 1.0, 0.0],
            Stage::BranchB => vec![0.0, 0.0, 1.0],
        }
    }
}

#[derive(Clone)]
pub struct TwoStepGame {
    spec: TwoStepGameSpec,
    stage: Stage,
    t: usize,
    done: bool,
}

impl TwoStepGame {
    pub fn new(spec: TwoStepGameSpec) -> Self {
        Self {
            spec,
            stage: Stage::Start,
            t: 0,
            done: false,
        }
    }

    fn result(&self, reward: f64) -> StepResult {
        let obs = self.stage.one_hot();
        StepResult {
            observations: vec![obs.clone(), obs.clone()],
            reward,
            terminated: self.done,
            alive_mask: vec![true, true],
            avail_actions: vec![vec![true, true], vec![true, true]],
            true_state: obs,
        }
    }
}

impl Environment for TwoStepGame {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: 2,
            n_actions: 2,
            obs_dim: 3,
            state_dim: 3,
            episode_limit: 2,
        }
    }

    fn reset(&mut self, _seed: u64) -> StepResult {
        self.stage = Stage::Start;
        self.t = 0;
        self.done = false;
        self.result(0.0)
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::Terminated);
        }
        let spec = self.spec();
        let avail = vec![vec![true, true], vec![true, true]];
        check_actions(&spec, &avail, joint_action)?;
        let reward = match self.stage {
            Stage::Start => {
                self.stage = if joint_action[0] == 0 {
                    Stage::BranchA
                } else {
                    Stage::BranchB
                };
                0.0
            }
            Stage::BranchA => {
                self.done = true;
                self.spec.matrix_a[joint_action[0]][joint_action[1]]
            }
            Stage::BranchB => {
                self.done = true;
                self.spec.matrix_b[joint_action[0]][joint_action[1]]
            }
        };
        self.t += 1;
        if self.t >= spec.episode_limit {
            self.done = true;
        }
        Ok(self.result(reward))
    }
}
