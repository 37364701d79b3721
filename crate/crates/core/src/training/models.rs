//! Online/target network bundles per algorithm.

use rand_chacha::ChaCha8Rng;

use crate::agents::AgentNetwork;
use crate::autodiff::{AdResult, ParameterSet};
use crate::config::{Algorithm, TrainConfig};
use crate::envs::EnvSpec;
use crate::inference::{GalaVgae, PriorModel, ACTION_EMBED};
use crate::mixing::{QmixMixer, StateSource};

/// Every network of one run: online trainables in `online`, frozen copies
/// in `target`. The target set starts at its own initialization and only
/// matches the online set after the first hard sync.
pub struct ModelSet {
    pub algorithm: Algorithm,
    pub env_spec: EnvSpec,
    pub state_dim: usize,
    pub agent: AgentNetwork,
    pub agent_target: AgentNetwork,
    pub mixer: Option<QmixMixer>,
    pub mixer_target: Option<QmixMixer>,
    pub vgae: Option<GalaVgae>,
    pub prior: Option<PriorModel>,
    pub online: ParameterSet,
    pub target: ParameterSet,
}

impl ModelSet {
    /// Networks are initialized from `rng` in a fixed order: online agent,
    /// target agent, online mixer, target mixer, inference VGAE, prior.
    pub fn new(cfg: &TrainConfig, env_spec: &EnvSpec, rng: &mut ChaCha8Rng) -> AdResult<Self> {
        let source = cfg.algorithm.state_source();
        let state_dim = source.dim(
            env_spec.state_dim,
            env_spec.n_agents,
            env_spec.obs_dim,
            cfg.rnn_hidden,
            cfg.latent_dim,
        );
        let mut online = ParameterSet::new();
        let mut target = ParameterSet::new();
        let agent = AgentNetwork::new(
            &mut online,
            env_spec.obs_dim,
            env_spec.n_actions,
            env_spec.n_agents,
            cfg.rnn_hidden,
            rng,
        )?;
        let agent_target = AgentNetwork::new(
            &mut target,
            env_spec.obs_dim,
            env_spec.n_actions,
            env_spec.n_agents,
            cfg.rnn_hidden,
            rng,
        )?;
        let (mixer, mixer_target) = if source == StateSource::None {
            (None, None)
        } else {
            let m = QmixMixer::new(
                &mut online,
                "mixer",
                env_spec.n_agents,
                state_dim,
                cfg.mixing_embed,
                rng,
            )?;
            let mt = QmixMixer::new(
                &mut target,
                "mixer",
                env_spec.n_agents,
                state_dim,
                cfg.mixing_embed,
                rng,
            )?;
            (Some(m), Some(mt))
        };
        let (vgae, prior) = if cfg.algorithm.uses_side_losses() {
            let vgae = GalaVgae::new(
                &mut online,
                env_spec.n_agents,
                cfg.rnn_hidden,
                cfg.inference_embed,
                cfg.latent_dim,
                rng,
            )?;
            let prior = PriorModel::new(
                &mut online,
                env_spec.n_agents,
                env_spec.n_actions,
                cfg.latent_dim,
                cfg.inference_embed,
                ACTION_EMBED,
                rng,
            )?;
            (Some(vgae), Some(prior))
        } else {
            (None, None)
        };
        target.freeze_all();
        Ok(Self {
            algorithm: cfg.algorithm,
            env_spec: *env_spec,
            state_dim,
            agent,
            agent_target,
            mixer,
            mixer_target,
            vgae,
            prior,
            online,
            target,
        })
    }

    /// Hard-copy online parameters into the target networks. The target set
    /// holds exactly the agent+mixer subset of the online names; the
    /// inference stack has no target copy.
    pub fn sync_target(&mut self) -> AdResult<()> {
        for (name, tval, _) in self.target.iter() {
            let oval = self.online.get(name)?;
            let data = oval.data_clone();
            if data.shape() != tval.shape().as_slice() {
                return Err(crate::autodiff::AdError::ShapeMismatch {
                    op: "sync_target",
                    lhs: tval.shape(),
                    rhs: data.shape().to_vec(),
                });
            }
            tval.set_data(data);
        }
        Ok(())
    }
}
