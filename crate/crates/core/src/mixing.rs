//! Joint action-value assembly: VDN linear sum and the QMIX monotonic
//! mixing network.
//!
//! QMIX conditions the mixer weights on a state vector through
//! hypernetworks; the weights pass through an absolute value, so
//! dQ_tot/dQ_a >= 0 holds exactly and the joint greedy action decomposes
//! into per-agent greedy actions (IGM).

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdError, AdResult, ParameterSet, Value};
use crate::nn::Linear;

pub const MIXING_EMBED: usize = 32;

#[derive(Debug, Error)]
pub enum MixError {
    #[error("joint-action enumeration budget exceeded: {combos} combinations > {budget}")]
    EnumerationBudget { combos: u64, budget: u64 },
}

/// What the mixing network is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateSource {
    /// Debug-channel global state (vanilla QMIX).
    TrueState,
    /// Concatenated per-agent observations (QMIX-PO).
    ObsConcat,
    /// Concatenated recurrent hidden outputs (QMIX-HO).
    HiddenConcat,
    /// Latent state inferred by the graph auto-encoder.
    SideLatent,
    /// No state: legal only with the VDN mixer.
    None,
}

impl StateSource {
    pub fn name(&self) -> &'static str {
        match self {
            StateSource::TrueState => "true_state",
            StateSource::ObsConcat => "obs_concat",
            StateSource::HiddenConcat => "hidden_concat",
            StateSource::SideLatent => "side_latent",
            StateSource::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "true_state" => Some(StateSource::TrueState),
            "obs_concat" => Some(StateSource::ObsConcat),
            "hidden_concat" => Some(StateSource::HiddenConcat),
            "side_latent" => Some(StateSource::SideLatent),
            "none" => Some(StateSource::None),
            _ => None,
        }
    }

    /// Dimension of the produced state vector.
    pub fn dim(
        &self,
        state_dim: usize,
        n_agents: usize,
        obs_dim: usize,
        rnn_hidden: usize,
        latent_dim: usize,
    ) -> usize {
        match self {
            StateSource::TrueState => state_dim,
            StateSource::ObsConcat => n_agents * obs_dim,
            StateSource::HiddenConcat => n_agents * rnn_hidden,
            StateSource::SideLatent => n_agents * latent_dim,
            StateSource::None => 0,
        }
    }
}

/// VDN: Q_tot is the sum of per-agent utilities. `q`: `[S, n]` -> `[S, 1]`.
pub fn vdn_mix(q: &Value) -> AdResult<Value> {
    let s = q.shape()[0];
    q.sum_axis(1)?.reshape(&[s, 1])
}

/// Monotonic mixing network with state-conditioned hypernetworks.
///
/// Single linear hypernets generate the two weight layers (taken through
/// an absolute value); the final bias comes from a two-layer network.
pub struct QmixMixer {
    pub n_agents: usize,
    pub state_dim: usize,
    pub embed: usize,
    pub hyper_w1: Linear,
    pub hyper_b1: Linear,
    pub hyper_w2: Linear,
    pub v1: Linear,
    pub v2: Linear,
}

impl QmixMixer {
    pub fn new(
        ps: &mut ParameterSet,
        name: &str,
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        rng: &mut ChaCha8Rng,
    ) -> AdResult<Self> {
        let hyper_w1 = Linear::new(ps, &format!("{name}/hyper_w1"), state_dim, n_agents * embed, rng)?;
        let hyper_b1 = Linear::new(ps, &format!("{name}/hyper_b1"), state_dim, embed, rng)?;
        let hyper_w2 = Linear::new(ps, &format!("{name}/hyper_w2"), state_dim, embed, rng)?;
        let v1 = Linear::new(ps, &format!("{name}/v1"), state_dim, embed, rng)?;
        let v2 = Linear::new(ps, &format!("{name}/v2"), embed, 1, rng)?;
        Ok(Self {
            n_agents,
            state_dim,
            embed,
            hyper_w1,
            hyper_b1,
            hyper_w2,
            v1,
            v2,
        })
    }

    /// `q`: `[S, n]`, `state`: `[S, state_dim]` -> Q_tot `[S, 1]`,
    /// differentiable w.r.t. both.
    pub fn mix(&self, q: &Value, state: &Value) -> AdResult<Value> {
        let sq = q.shape();
        let ss = state.shape();
        if sq.len() != 2 || sq[1] != self.n_agents {
            return Err(AdError::ShapeMismatch {
                op: "qmix_mix q",
                lhs: sq,
                rhs: vec![0, self.n_agents],
            });
        }
        if ss.len() != 2 || ss[1] != self.state_dim || ss[0] != sq[0] {
            return Err(AdError::ShapeMismatch {
                op: "qmix_mix state",
                lhs: ss,
                rhs: vec![sq[0], self.state_dim],
            });
        }
        let s = sq[0];
        let w1 = self
            .hyper_w1
            .forward(state)?
            .abs()
            .reshape(&[s, self.n_agents, self.embed])?;
        let b1 = self.hyper_b1.forward(state)?;
        let hidden = q
            .reshape(&[s, 1, self.n_agents])?
            .bmm(&w1)?
            .reshape(&[s, self.embed])?
            .add(&b1)?
            .elu();
        let w2 = self.hyper_w2.forward(state)?.abs().reshape(&[s, self.embed, 1])?;
        let v = self.v2.forward(&self.v1.forward(state)?.relu())?;
        hidden
            .reshape(&[s, 1, self.embed])?
            .bmm(&w2)?
            .reshape(&[s, 1])?
            .add(&v)
    }

    /// Single-sample convenience wrapper around [`Self::mix`].
    pub fn mix_one(&self, q_agents: &[f64], state: &[f64]) -> AdResult<f64> {
        let q = Value::constant(
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[1, q_agents.len()]), q_agents.to_vec())
                .expect("shape"),
        );
        let st = Value::constant(
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[1, state.len()]), state.to_vec())
                .expect("shape"),
        );
        Ok(self.mix(&q, &st)?.item())
    }
}

pub const IGM_ENUMERATION_BUDGET: u64 = 1 << 20;

/// Check Individual-Global-Max consistency by exhaustive joint enumeration:
/// the joint action maximizing `joint_fn` must equal the tuple of per-agent
/// argmaxes of `q_tables` (ties to the lowest index).
pub fn igm_check(
    q_tables: &[Vec<f64>],
    joint_fn: impl Fn(&[f64]) -> f64,
) -> Result<bool, MixError> {
    let n = q_tables.len();
    let n_actions = q_tables[0].len();
    let combos = (n_actions as u64).saturating_pow(n as u32);
    if combos > IGM_ENUMERATION_BUDGET {
        return Err(MixError::EnumerationBudget {
            combos,
            budget: IGM_ENUMERATION_BUDGET,
        });
    }
    let individual: Vec<usize> = q_tables
        .iter()
        .map(|t| {
            crate::agents::greedy_action(t, &vec![true; t.len()]).expect("nonempty table")
        })
        .collect();

    let mut best_joint = vec![0usize; n];
    let mut best_val = f64::NEG_INFINITY;
    let mut action = vec![0usize; n];
    loop {
        let q_row: Vec<f64> = (0..n).map(|a| q_tables[a][action[a]]).collect();
        let v = joint_fn(&q_row);
        if v > best_val {
            best_val = v;
            best_joint = action.clone();
        }
        let mut i = n;
        loop {
            if i == 0 {
                return Ok(best_joint == individual);
            }
            i -= 1;
            action[i] += 1;
            if action[i] < n_actions {
                break;
            }
            action[i] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(lo..hi)).collect()
    }

    fn mixer(n: usize, sd: usize, seed: u64) -> (ParameterSet, QmixMixer) {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = QmixMixer::new(&mut ps, "mixer", n, sd, MIXING_EMBED, &mut rng).unwrap();
        (ps, m)
    }

    #[test]
    fn vdn_sums_and_is_permutation_invariant() {
        let q = Value::constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap(),
        );
        let out = vdn_mix(&q).unwrap();
        assert_eq!(out.shape(), vec![2, 1]);
        assert_eq!(out.data_clone()[[0, 0]], 0.0);
        assert_eq!(out.data_clone()[[1, 0]], 6.0);
        let q_perm = Value::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![3.0, 1.0, 2.0]).unwrap(),
        );
        assert_eq!(vdn_mix(&q_perm).unwrap().data_clone()[[0, 0]], 6.0);
    }

    #[test]
    fn zero_hypernets_make_qtot_independent_of_q() {
        let (ps, m) = mixer(3, 5, 3);
        for name in [
            "mixer/hyper_w1/w",
            "mixer/hyper_w1/b",
            "mixer/hyper_w2/w",
            "mixer/hyper_w2/b",
        ] {
            let v = ps.get(name).unwrap();
            v.set_data(ArrayD::zeros(IxDyn(&v.shape())));
        }
        let state = vec![0.3, -0.2, 0.8, 0.1, -0.5];
        let a = m.mix_one(&[1.0, -4.0, 2.5], &state).unwrap();
        let b = m.mix_one(&[-100.0, 3.0, 9.9], &state).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn state_dimension_mismatch_rejected() {
        let (_ps, m) = mixer(3, 5, 4);
        assert!(m.mix_one(&[0.0, 0.0, 0.0], &[0.0; 4]).is_err());
        assert!(m.mix_one(&[0.0, 0.0], &[0.0; 5]).is_err());
    }

    /// Monotonicity sweep oracle: bumping any single agent utility never
    /// lowers Q_tot.
    #[test]
    fn monotone_in_every_agent_utility() {
        let (_ps, m) = mixer(3, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let delta = 1e-3;
        for _ in 0..1000 {
            let q = rand_vec(&mut rng, 3, -5.0, 5.0);
            let state = rand_vec(&mut rng, 6, -2.0, 2.0);
            let base = m.mix_one(&q, &state).unwrap();
            let agent = rng.random_range(0..3);
            let mut q2 = q.clone();
            q2[agent] += delta;
            let bumped = m.mix_one(&q2, &state).unwrap();
            assert!(
                bumped >= base - 1e-9,
                "Q_tot dropped: {base} -> {bumped} (agent {agent})"
            );
        }
    }

    /// dQ_tot/dQ_a from backward matches central finite differences and is
    /// never negative.
    #[test]
    fn mixer_gradients_match_fd_and_stay_nonnegative() {
        let (_ps, m) = mixer(3, 6, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let qv = rand_vec(&mut rng, 3, -3.0, 3.0);
            let sv = rand_vec(&mut rng, 6, -2.0, 2.0);
            let q = Value::param(ArrayD::from_shape_vec(IxDyn(&[1, 3]), qv.clone()).unwrap());
            let st = Value::constant(ArrayD::from_shape_vec(IxDyn(&[1, 6]), sv.clone()).unwrap());
            let out = m.mix(&q, &st).unwrap().sum_all();
            out.backward().unwrap();
            let grad = q.grad().unwrap();
            for a in 0..3 {
                assert!(grad[[0, a]] >= -1e-9);
                let h = 1e-5;
                let mut qp = qv.clone();
                qp[a] += h;
                let mut qm = qv.clone();
                qm[a] -= h;
                let fd = (m.mix_one(&qp, &sv).unwrap() - m.mix_one(&qm, &sv).unwrap()) / (2.0 * h);
                let err = (grad[[0, a]] - fd).abs();
                assert!(
                    err <= 1e-4 * fd.abs().max(1e-3),
                    "grad {} vs fd {fd}",
                    grad[[0, a]]
                );
            }
        }
    }

    #[test]
    fn igm_holds_for_vdn_on_any_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let tables: Vec<Vec<f64>> =
                (0..3).map(|_| rand_vec(&mut rng, 4, -5.0, 5.0)).collect();
            let ok = igm_check(&tables, |q| q.iter().sum()).unwrap();
            assert!(ok);
        }
    }

    #[test]
    fn igm_holds_for_qmix_on_500_random_instances() {
        let (_ps, m) = mixer(3, 4, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..500 {
            let tables: Vec<Vec<f64>> =
                (0..3).map(|_| rand_vec(&mut rng, 4, -5.0, 5.0)).collect();
            let state = rand_vec(&mut rng, 4, -2.0, 2.0);
            let ok = igm_check(&tables, |q| m.mix_one(q, &state).unwrap()).unwrap();
            assert!(ok);
        }
    }

    /// A mixer with one negative first-layer weight admits an IGM
    /// counterexample somewhere in random instance space.
    #[test]
    fn non_monotonic_fixture_breaks_igm_somewhere() {
        // hand-built one-hidden-unit "mixer": Q_tot = w . q with w1 negative
        let w = [-1.0, 1.0, 1.0];
        let joint = |q: &[f64]| -> f64 { q.iter().zip(w.iter()).map(|(a, b)| a * b).sum() };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut found = false;
        for _ in 0..200 {
            let tables: Vec<Vec<f64>> =
                (0..3).map(|_| rand_vec(&mut rng, 4, -5.0, 5.0)).collect();
            if !igm_check(&tables, joint).unwrap() {
                found = true;
                break;
            }
        }
        assert!(found, "no IGM counterexample found for a non-monotonic mixer");
    }

    #[test]
    fn enumeration_budget_guard() {
        let tables: Vec<Vec<f64>> = (0..8).map(|_| vec![0.0; 64]).collect();
        assert!(matches!(
            igm_check(&tables, |q| q.iter().sum()),
            Err(MixError::EnumerationBudget { .. })
        ));
    }
}
