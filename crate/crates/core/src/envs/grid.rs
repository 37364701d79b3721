//! Hidden-treasure gridworld.
//!
//! Agents move on an `side x side` board with sight radius `sight`. Two
//! treasures are placed uniformly at random; lifting one takes two agents
//! gripping opposite handles — a treasure is captured when at least two
//! agents are adjacent to it simultaneously, standing on opposite sides
//! (north/south or east/west). Capture pays +1 and removes the treasure;
//! every step costs -0.01. The episode ends when all treasures are
//! captured or the step limit is hit.
//!
//! Observations carry a local window (out-of-bounds flag, other-agent count,
//! treasure flag per cell) plus the agent's own normalized position, so
//! treasure locations out of sight are genuinely hidden; the true state
//! (all coordinates plus treasure status) is exposed only on the debug
//! channel.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_actions, EnvError, Environment, EnvSpec, StepResult};

pub const ACT_NOOP: usize = 0;
pub const ACT_UP: usize = 1;
pub const ACT_DOWN: usize = 2;
pub const ACT_LEFT: usize = 3;
pub const ACT_RIGHT: usize = 4;
pub const N_ACTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTreasureGridSpec {
    pub side: usize,
    pub n_agents: usize,
    pub sight: usize,
    pub n_treasures: usize,
    pub step_reward: f64,
    pub capture_reward: f64,
    pub episode_limit: usize,
}

impl Default for HiddenTreasureGridSpec {
    fn default() -> Self {
        Self {
            side: 7,
            n_agents: 3,
            sight: 1,
            n_treasures: 2,
            step_reward: -0.01,
            capture_reward: 1.0,
            episode_limit: 50,
        }
    }
}

/// Explicit placement, for fixtures and the placement oracle.
#[derive(Debug, Clone)]
pub struct GridLayout {
    pub agents: Vec<(usize, usize)>,
    pub treasures: Vec<(usize, usize)>,
}

#[derive(Clone)]
pub struct HiddenTreasureGrid {
    spec: HiddenTreasureGridSpec,
    agents: Vec<(usize, usize)>,
    treasures: Vec<(usize, usize)>,
    treasure_alive: Vec<bool>,
    t: usize,
    done: bool,
}

impl HiddenTreasureGrid {
    pub fn new(spec: HiddenTreasureGridSpec) -> Self {
        let n_agents = spec.n_agents;
        let n_treasures = spec.n_treasures;
        Self {
            spec,
            agents: vec![(0, 0); n_agents],
            treasures: vec![(0, 0); n_treasures],
            treasure_alive: vec![true; n_treasures],
            t: 0,
            done: false,
        }
    }

    pub fn grid_spec(&self) -> &HiddenTreasureGridSpec {
        &self.spec
    }

    /// Seeded placement: draw distinct cells by rejection from a
    /// `ChaCha8Rng(seed)` stream, agents first, then treasures. Treasures
    /// never land in corners, where no opposite pair of handle cells fits
    /// on the board.
    pub fn place_from_seed(spec: &HiddenTreasureGridSpec, seed: u64) -> GridLayout {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = spec.side * spec.side;
        let side = spec.side;
        let is_corner = move |c: usize| -> bool {
            let (r, col) = (c / side, c % side);
            (r == 0 || r == side - 1) && (col == 0 || col == side - 1)
        };
        let mut taken: Vec<usize> = Vec::new();
        let mut draw = |taken: &mut Vec<usize>, no_corner: bool| -> (usize, usize) {
            loop {
                let c = rng.random_range(0..cells);
                if !taken.contains(&c) && !(no_corner && is_corner(c)) {
                    taken.push(c);
                    return (c / side, c % side);
                }
            }
        };
        let agents = (0..spec.n_agents).map(|_| draw(&mut taken, false)).collect();
        let treasures = (0..spec.n_treasures).map(|_| draw(&mut taken, true)).collect();
        GridLayout { agents, treasures }
    }

    /// Start an episode from an explicit layout (fixture entry point).
    pub fn reset_with_layout(&mut self, layout: GridLayout) -> StepResult {
        assert_eq!(layout.agents.len(), self.spec.n_agents);
        assert_eq!(layout.treasures.len(), self.spec.n_treasures);
        self.agents = layout.agents;
        self.treasures = layout.treasures;
        self.treasure_alive = vec![true; self.spec.n_treasures];
        self.t = 0;
        self.done = false;
        self.result(0.0)
    }

    fn observation(&self, agent: usize) -> Vec<f64> {
        let (r, c) = self.agents[agent];
        let s = self.spec.sight as isize;
        let side = self.spec.side as isize;
        let mut obs = Vec::with_capacity(self.obs_dim());
        for dr in -s..=s {
            for dc in -s..=s {
                let rr = r as isize + dr;
                let cc = c as isize + dc;
                if rr < 0 || rr >= side || cc < 0 || cc >= side {
                    obs.extend_from_slice(&[1.0, 0.0, 0.0]);
                    continue;
                }
                let cell = (rr as usize, cc as usize);
                let others = self
                    .agents
                    .iter()
                    .enumerate()
                    .filter(|(i, &p)| *i != agent && p == cell)
                    .count();
                let treasure = self
                    .treasures
                    .iter()
                    .zip(&self.treasure_alive)
                    .any(|(&p, &alive)| alive && p == cell);
                obs.extend_from_slice(&[0.0, others as f64, if treasure { 1.0 } else { 0.0 }]);
            }
        }
        let denom = (self.spec.side - 1).max(1) as f64;
        obs.push(r as f64 / denom);
        obs.push(c as f64 / denom);
        obs
    }

    fn obs_dim(&self) -> usize {
        let w = 2 * self.spec.sight + 1;
        w * w * 3 + 2
    }

    fn true_state(&self) -> Vec<f64> {
        let denom = (self.spec.side - 1).max(1) as f64;
        let mut s = Vec::with_capacity(self.spec().state_dim);
        for &(r, c) in &self.agents {
            s.push(r as f64 / denom);
            s.push(c as f64 / denom);
        }
        for (&(r, c), &alive) in self.treasures.iter().zip(&self.treasure_alive) {
            s.push(r as f64 / denom);
            s.push(c as f64 / denom);
            s.push(if alive { 1.0 } else { 0.0 });
        }
        s
    }

    fn avail_actions(&self) -> Vec<Vec<bool>> {
        let side = self.spec.side as isize;
        self.agents
            .iter()
            .map(|&(r, c)| {
                let mut avail = vec![true; N_ACTIONS];
                avail[ACT_UP] = r > 0;
                avail[ACT_DOWN] = (r as isize) + 1 < side;
                avail[ACT_LEFT] = c > 0;
                avail[ACT_RIGHT] = (c as isize) + 1 < side;
                avail
            })
            .collect()
    }

    fn result(&self, reward: f64) -> StepResult {
        StepResult {
            observations: (0..self.spec.n_agents).map(|a| self.observation(a)).collect(),
            reward,
            terminated: self.done,
            alive_mask: vec![true; self.spec.n_agents],
            avail_actions: self.avail_actions(),
            true_state: self.true_state(),
        }
    }
}

impl Environment for HiddenTreasureGrid {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: self.spec.n_agents,
            n_actions: N_ACTIONS,
            obs_dim: self.obs_dim(),
            state_dim: 2 * self.spec.n_agents + 3 * self.spec.n_treasures,
            episode_limit: self.spec.episode_limit,
        }
    }

    fn reset(&mut self, seed: u64) -> StepResult {
        let layout = Self::place_from_seed(&self.spec, seed);
        self.reset_with_layout(layout)
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::Terminated);
        }
        let spec = self.spec();
        check_actions(&spec, &self.avail_actions(), joint_action)?;
        for (agent, &a) in joint_action.iter().enumerate() {
            let (r, c) = self.agents[agent];
            self.agents[agent] = match a {
                ACT_UP => (r - 1, c),
                ACT_DOWN => (r + 1, c),
                ACT_LEFT => (r, c - 1),
                ACT_RIGHT => (r, c + 1),
                _ => (r, c),
            };
        }
        let mut reward = self.spec.step_reward;
        for ti in 0..self.treasures.len() {
            if !self.treasure_alive[ti] {
                continue;
            }
            let (tr, tc) = self.treasures[ti];
            // occupied handle sides: offsets of agents at Manhattan distance 1
            let mut north = false;
            let mut south = false;
            let mut west = false;
            let mut east = false;
            for &(r, c) in &self.agents {
                if r.abs_diff(tr) + c.abs_diff(tc) != 1 {
                    continue;
                }
                if r + 1 == tr {
                    north = true;
                } else if r == tr + 1 {
                    south = true;
                } else if c + 1 == tc {
                    west = true;
                } else {
                    east = true;
                }
            }
            if (north && south) || (west && east) {
                reward += self.spec.capture_reward;
                self.treasure_alive[ti] = false;
            }
        }
        self.t += 1;
        if self.treasure_alive.iter().all(|&a| !a) || self.t >= self.spec.episode_limit {
            self.done = true;
        }
        Ok(self.result(reward))
    }
}
