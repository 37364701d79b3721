//! Run configuration: plain-text `key = value` files plus CLI overrides.
//!
//! Unknown keys are rejected and every violation names its field. The
//! algorithm pins the mixer's state source; an explicit `state_source` key
//! is only accepted when it agrees.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::envs::HiddenTreasureGridSpec;
use crate::mixing::StateSource;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("field '{field}': cannot parse '{value}' as {ty}")]
    BadValue {
        field: String,
        value: String,
        ty: &'static str,
    },
    #[error("field '{field}': {reason}")]
    Constraint { field: String, reason: String },
    #[error("malformed line {line}: expected 'key = value'")]
    Malformed { line: usize },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Vdn,
    Qmix,
    QmixPo,
    QmixHo,
    Side,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Vdn => "vdn",
            Algorithm::Qmix => "qmix",
            Algorithm::QmixPo => "qmix_po",
            Algorithm::QmixHo => "qmix_ho",
            Algorithm::Side => "side",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vdn" => Some(Algorithm::Vdn),
            "qmix" => Some(Algorithm::Qmix),
            "qmix_po" => Some(Algorithm::QmixPo),
            "qmix_ho" => Some(Algorithm::QmixHo),
            "side" => Some(Algorithm::Side),
            _ => None,
        }
    }

    /// The state source this algorithm requires.
    pub fn state_source(&self) -> StateSource {
        match self {
            Algorithm::Vdn => StateSource::None,
            Algorithm::Qmix => StateSource::TrueState,
            Algorithm::QmixPo => StateSource::ObsConcat,
            Algorithm::QmixHo => StateSource::HiddenConcat,
            Algorithm::Side => StateSource::SideLatent,
        }
    }

    pub fn uses_side_losses(&self) -> bool {
        matches!(self, Algorithm::Side)
    }
}

/// Fully resolved training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub env: String,
    pub seed: u64,
    pub total_timesteps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub lr: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub target_update_episodes: u64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    pub rnn_hidden: usize,
    pub mixing_embed: usize,
    pub latent_dim: usize,
    pub inference_embed: usize,
    pub out: PathBuf,
    pub grid_side: usize,
    pub grid_agents: usize,
    pub grid_sight: usize,
    pub grid_treasures: usize,
    pub grid_episode_limit: usize,
    pub dump_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Side,
            env: "two_step".to_string(),
            seed: 1,
            total_timesteps: 2_050_000,
            eval_interval: 10_000,
            eval_episodes: 32,
            lr: 0.0005,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 0.00001,
            target_update_episodes: 200,
            grad_clip: 10.0,
            batch_size: 32,
            buffer_capacity: 5000,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            rnn_hidden: 64,
            mixing_embed: 32,
            latent_dim: 64,
            inference_embed: 128,
            out: PathBuf::from("runs/latest"),
            grid_side: 7,
            grid_agents: 3,
            grid_sight: 1,
            grid_treasures: 2,
            grid_episode_limit: 50,
            dump_episodes: 32,
        }
    }
}

impl TrainConfig {
    pub fn state_source(&self) -> StateSource {
        self.algorithm.state_source()
    }

    pub fn grid_spec(&self) -> HiddenTreasureGridSpec {
        HiddenTreasureGridSpec {
            side: self.grid_side,
            n_agents: self.grid_agents,
            sight: self.grid_sight,
            n_treasures: self.grid_treasures,
            episode_limit: self.grid_episode_limit,
            ..HiddenTreasureGridSpec::default()
        }
    }

    /// Parse a `key = value` config file, then apply overrides, then
    /// validate.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let mut pairs = parse_pairs(&text)?;
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    /// Build from key/value pairs over the defaults.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = TrainConfig::default();
        let mut explicit_source: Option<StateSource> = None;
        for (key, value) in pairs {
            cfg.apply(key, value, &mut explicit_source)?;
        }
        cfg.validate(explicit_source)?;
        Ok(cfg)
    }

    fn apply(
        &mut self,
        key: &str,
        value: &str,
        explicit_source: &mut Option<StateSource>,
    ) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(
            field: &str,
            value: &str,
            ty: &'static str,
        ) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                field: field.to_string(),
                value: value.to_string(),
                ty,
            })
        }
        match key {
            "algorithm" => {
                self.algorithm = Algorithm::parse(value).ok_or_else(|| ConfigError::BadValue {
                    field: key.to_string(),
                    value: value.to_string(),
                    ty: "one of vdn|qmix|qmix_po|qmix_ho|side",
                })?;
            }
            "env" => self.env = value.to_string(),
            "seed" => self.seed = num(key, value, "u64")?,
            "total_timesteps" => self.total_timesteps = num(key, value, "u64")?,
            "eval_interval" => self.eval_interval = num(key, value, "u64")?,
            "eval_episodes" => self.eval_episodes = num(key, value, "usize")?,
            "lr" => self.lr = num(key, value, "f64")?,
            "rmsprop_alpha" => self.rmsprop_alpha = num(key, value, "f64")?,
            "rmsprop_eps" => self.rmsprop_eps = num(key, value, "f64")?,
            "target_update_episodes" => self.target_update_episodes = num(key, value, "u64")?,
            "grad_clip" => self.grad_clip = num(key, value, "f64")?,
            "batch_size" => self.batch_size = num(key, value, "usize")?,
            "buffer_capacity" => self.buffer_capacity = num(key, value, "usize")?,
            "gamma" => self.gamma = num(key, value, "f64")?,
            "epsilon_start" => self.epsilon_start = num(key, value, "f64")?,
            "epsilon_end" => self.epsilon_end = num(key, value, "f64")?,
            "epsilon_anneal_steps" => self.epsilon_anneal_steps = num(key, value, "u64")?,
            "rnn_hidden" => self.rnn_hidden = num(key, value, "usize")?,
            "mixing_embed" => self.mixing_embed = num(key, value, "usize")?,
            "latent_dim" => self.latent_dim = num(key, value, "usize")?,
            "inference_embed" => self.inference_embed = num(key, value, "usize")?,
            "state_source" => {
                *explicit_source =
                    Some(StateSource::parse(value).ok_or_else(|| ConfigError::BadValue {
                        field: key.to_string(),
                        value: value.to_string(),
                        ty: "one of true_state|obs_concat|hidden_concat|side_latent|none",
                    })?);
            }
            "out" => self.out = PathBuf::from(value),
            "grid_side" => self.grid_side = num(key, value, "usize")?,
            "grid_agents" => self.grid_agents = num(key, value, "usize")?,
            "grid_sight" => self.grid_sight = num(key, value, "usize")?,
            "grid_treasures" => self.grid_treasures = num(key, value, "usize")?,
            "grid_episode_limit" => self.grid_episode_limit = num(key, value, "usize")?,
            "dump_episodes" => self.dump_episodes = num(key, value, "usize")?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    fn validate(&self, explicit_source: Option<StateSource>) -> Result<(), ConfigError> {
        let constraint = |field: &str, reason: String| ConfigError::Constraint {
            field: field.to_string(),
            reason,
        };
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(constraint("gamma", format!("{} not in [0, 1)", self.gamma)));
        }
        if let Some(src) = explicit_source {
            let forced = self.algorithm.state_source();
            if src != forced {
                return Err(constraint(
                    "state_source",
                    format!(
                        "algorithm '{}' requires state source '{}', got '{}'",
                        self.algorithm.name(),
                        forced.name(),
                        src.name()
                    ),
                ));
            }
        }
        if self.env != "two_step" && self.env != "treasure_grid" {
            return Err(constraint(
                "env",
                format!("unknown environment '{}'", self.env),
            ));
        }
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("eval_episodes", self.eval_episodes),
            ("rnn_hidden", self.rnn_hidden),
            ("mixing_embed", self.mixing_embed),
            ("latent_dim", self.latent_dim),
            ("inference_embed", self.inference_embed),
            ("grid_side", self.grid_side),
            ("grid_agents", self.grid_agents),
            ("grid_treasures", self.grid_treasures),
            ("grid_episode_limit", self.grid_episode_limit),
        ] {
            if v == 0 {
                return Err(constraint(field, "must be at least 1".to_string()));
            }
        }
        if self.buffer_capacity < self.batch_size {
            return Err(constraint(
                "buffer_capacity",
                format!("{} smaller than batch_size {}", self.buffer_capacity, self.batch_size),
            ));
        }
        for (field, v) in [
            ("lr", self.lr),
            ("rmsprop_alpha", self.rmsprop_alpha),
            ("rmsprop_eps", self.rmsprop_eps),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0) {
                return Err(constraint(field, format!("{v} must be positive")));
            }
        }
        for (field, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(constraint(field, format!("{v} not in [0, 1]")));
            }
        }
        if self.epsilon_end > self.epsilon_start {
            return Err(constraint(
                "epsilon_end",
                "annealing must be non-increasing".to_string(),
            ));
        }
        if self.total_timesteps == 0 || self.eval_interval == 0 || self.target_update_episodes == 0
        {
            return Err(constraint(
                if self.total_timesteps == 0 {
                    "total_timesteps"
                } else if self.eval_interval == 0 {
                    "eval_interval"
                } else {
                    "target_update_episodes"
                },
                "must be at least 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Serialize as a `key = value` snapshot; reparsing yields an equal
    /// config.
    pub fn to_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("algorithm", self.algorithm.name().to_string());
        kv.insert("env", self.env.clone());
        kv.insert("seed", self.seed.to_string());
        kv.insert("total_timesteps", self.total_timesteps.to_string());
        kv.insert("eval_interval", self.eval_interval.to_string());
        kv.insert("eval_episodes", self.eval_episodes.to_string());
        kv.insert("lr", self.lr.to_string());
        kv.insert("rmsprop_alpha", self.rmsprop_alpha.to_string());
        kv.insert("rmsprop_eps", self.rmsprop_eps.to_string());
        kv.insert(
            "target_update_episodes",
            self.target_update_episodes.to_string(),
        );
        kv.insert("grad_clip", self.grad_clip.to_string());
        kv.insert("batch_size", self.batch_size.to_string());
        kv.insert("buffer_capacity", self.buffer_capacity.to_string());
        kv.insert("gamma", self.gamma.to_string());
        kv.insert("epsilon_start", self.epsilon_start.to_string());
        kv.insert("epsilon_end", self.epsilon_end.to_string());
        kv.insert(
            "epsilon_anneal_steps",
            self.epsilon_anneal_steps.to_string(),
        );
        kv.insert("rnn_hidden", self.rnn_hidden.to_string());
        kv.insert("mixing_embed", self.mixing_embed.to_string());
        kv.insert("latent_dim", self.latent_dim.to_string());
        kv.insert("inference_embed", self.inference_embed.to_string());
        kv.insert("state_source", self.state_source().name().to_string());
        kv.insert("out", self.out.display().to_string());
        kv.insert("grid_side", self.grid_side.to_string());
        kv.insert("grid_agents", self.grid_agents.to_string());
        kv.insert("grid_sight", self.grid_sight.to_string());
        kv.insert("grid_treasures", self.grid_treasures.to_string());
        kv.insert("grid_episode_limit", self.grid_episode_limit.to_string());
        kv.insert("dump_episodes", self.dump_episodes.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Parse `key = value` lines; `#` starts a comment; blank lines skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or(ConfigError::Malformed { line: i + 1 })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_materializes_defaults() {
        let cfg = TrainConfig::from_pairs(&[("algorithm".into(), "side".into())]).unwrap();
        assert_eq!(cfg.lr, 0.0005);
        assert_eq!(cfg.rmsprop_alpha, 0.99);
        assert_eq!(cfg.rmsprop_eps, 0.00001);
        assert_eq!(cfg.target_update_episodes, 200);
        assert_eq!(cfg.grad_clip, 10.0);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.buffer_capacity, 5000);
        assert_eq!(cfg.gamma, 0.99);
        assert_eq!(cfg.epsilon_anneal_steps, 50_000);
        assert_eq!(cfg.epsilon_start, 1.0);
        assert_eq!(cfg.epsilon_end, 0.05);
        assert_eq!(cfg.rnn_hidden, 64);
        assert_eq!(cfg.mixing_embed, 32);
        assert_eq!(cfg.latent_dim, 64);
        assert_eq!(cfg.inference_embed, 128);
        assert_eq!(cfg.total_timesteps, 2_050_000);
        assert_eq!(cfg.eval_interval, 10_000);
        assert_eq!(cfg.state_source(), StateSource::SideLatent);
    }

    #[test]
    fn gamma_out_of_range_rejected() {
        let err = TrainConfig::from_pairs(&[("gamma".into(), "1.5".into())]).unwrap_err();
        match err {
            ConfigError::Constraint { field, .. } => assert_eq!(field, "gamma"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn algorithm_forces_state_source() {
        let err = TrainConfig::from_pairs(&[
            ("algorithm".into(), "vdn".into()),
            ("state_source".into(), "true_state".into()),
        ])
        .unwrap_err();
        match err {
            ConfigError::Constraint { field, .. } => assert_eq!(field, "state_source"),
            other => panic!("unexpected {other}"),
        }
        // agreeing explicit source is fine
        let cfg = TrainConfig::from_pairs(&[
            ("algorithm".into(), "vdn".into()),
            ("state_source".into(), "none".into()),
        ])
        .unwrap();
        assert_eq!(cfg.state_source(), StateSource::None);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::from_pairs(&[("lr2".into(), "0.1".into())]).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "lr2"));
    }

    #[test]
    fn type_mismatch_names_field() {
        let err = TrainConfig::from_pairs(&[("batch_size".into(), "many".into())]).unwrap_err();
        match err {
            ConfigError::BadValue { field, .. } => assert_eq!(field, "batch_size"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn config_roundtrip_is_identity() {
        let cfg = TrainConfig::from_pairs(&[
            ("algorithm".into(), "qmix_ho".into()),
            ("env".into(), "treasure_grid".into()),
            ("seed".into(), "7".into()),
            ("total_timesteps".into(), "200000".into()),
            ("lr".into(), "0.001".into()),
        ])
        .unwrap();
        let text = cfg.to_text();
        let pairs = parse_pairs(&text).unwrap();
        let back = TrainConfig::from_pairs(&pairs).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let pairs = parse_pairs("# a comment\n\nseed = 3 # trailing\n").unwrap();
        assert_eq!(pairs, vec![("seed".to_string(), "3".to_string())]);
    }
}
