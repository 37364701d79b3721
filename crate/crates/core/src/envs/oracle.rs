//! Brute-force optimal-return oracle for enumerable environments.
//!
//! Exhaustive open-loop search over all joint-action sequences up to the
//! episode limit, from a fixed reset. The search budget caps the number of
//! sequence expansions so non-enumerable environments are rejected rather
//! than ground through.

use thiserror::Error;

use super::{Environment, EnvError};

pub const DEFAULT_ORACLE_BUDGET: u64 = 5_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration budget exceeded ({budget} expansions): environment is not enumerable")]
    BudgetExceeded { budget: u64 },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Maximum achievable undiscounted episode return from `reset(seed)`,
/// by exhaustive search over joint-action sequences.
pub fn oracle_optimal_return<E: Environment + Clone>(
    env: &E,
    seed: u64,
    budget: u64,
) -> Result<f64, OracleError> {
    let spec = env.spec();
    let joint = joint_action_count(spec.n_actions, spec.n_agents);
    // Worst-case expansion count: sum_{d=1..limit} joint^d.
    let mut worst: u64 = 0;
    let mut layer: u64 = 1;
    for _ in 0..spec.episode_limit {
        layer = layer.saturating_mul(joint);
        worst = worst.saturating_add(layer);
        if worst > budget {
            return Err(OracleError::BudgetExceeded { budget });
        }
    }
    let mut root = env.clone();
    let start = root.reset(seed);
    let mut expansions: u64 = 0;
    let best = search(&root, &start, 0.0, &mut expansions, budget)?;
    Ok(best)
}

fn joint_action_count(n_actions: usize, n_agents: usize) -> u64 {
    (n_actions as u64).saturating_pow(n_agents as u32)
}

fn search<E: Environment + Clone>(
    env: &E,
    current: &super::StepResult,
    ret: f64,
    expansions: &mut u64,
    budget: u64,
) -> Result<f64, OracleError> {
    if current.terminated {
        return Ok(ret);
    }
    let spec = env.spec();
    let mut best = f64::NEG_INFINITY;
    let mut action = vec![0usize; spec.n_agents];
    loop {
        if action
            .iter()
            .enumerate()
            .all(|(a, &u)| current.avail_actions[a][u])
        {
            *expansions += 1;
            if *expansions > budget {
                return Err(OracleError::BudgetExceeded { budget });
            }
            let mut child = env.clone();
            let res = child.step(&action)?;
            let sub = search(&child, &res, ret + res.reward, expansions, budget)?;
            if sub > best {
                best = sub;
            }
        }
        // next joint action (odometer)
        let mut i = 0;
        loop {
            if i == spec.n_agents {
                return Ok(best);
            }
            action[i] += 1;
            if action[i] < spec.n_actions {
                break;
            }
            action[i] = 0;
            i += 1;
        }
    }
}
