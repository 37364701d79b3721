//! Latent-state inference: a variational graph auto-encoder over the agent
//! graph plus a learned latent prior.
//!
//! The encoder smooths node features (the agents' recurrent hidden outputs)
//! over the aliveness graph and maps each node to a diagonal Gaussian; the
//! latent state fed to the mixer is the concatenation of the node means, so
//! it is a deterministic function of the hidden outputs. The decoder runs
//! the symmetric sharpening propagation to reconstruct the hidden outputs
//! from a reparameterized sample. The prior model is a plain VAE over
//! (previous latent state, previous joint action).

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agents::{AgentHiddenSet, HiddenSource};
use crate::autodiff::{AdResult, Arr, ParameterSet, Value};
use crate::nn::Linear;

pub const INFERENCE_EMBED: usize = 128;
pub const LATENT_PER_AGENT: usize = 64;
/// Width of the learned per-action embedding in the prior encoder.
pub const ACTION_EMBED: usize = 8;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("state inference consumes target-sourced hidden outputs, got online")]
    OnlineHiddenRejected,
}

// ---- adjacency and propagation operators ----

/// Aliveness graph: `A[i][j] = 1` iff agents `i` and `j` are both alive
/// (diagonal included), zero otherwise.
pub fn build_adjacency(alive: &[bool]) -> Array2<f64> {
    let n = alive.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if alive[i] && alive[j] {
            1.0
        } else {
            0.0
        }
    })
}

/// Smoothing propagation: `D^{-1/2} (A v I) D^{-1/2}` where `A v I` forces
/// self-loops (entrywise max with the identity) and `D` is its degree
/// matrix. Self-loops keep dead/isolated nodes well-defined.
pub fn smooth_operator(adj: &Array2<f64>) -> Array2<f64> {
    let n = adj.nrows();
    let mut a = adj.clone();
    for i in 0..n {
        if a[[i, i]] < 1.0 {
            a[[i, i]] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if a[[i, j]] != 0.0 {
                p[[i, j]] = a[[i, j]] / (deg[i].sqrt() * deg[j].sqrt());
            }
        }
    }
    p
}

/// Sharpening propagation: `2I - smooth_operator(A)`.
pub fn sharpen_operator(adj: &Array2<f64>) -> Array2<f64> {
    let n = adj.nrows();
    let mut p = smooth_operator(adj).mapv(|x| -x);
    for i in 0..n {
        p[[i, i]] += 2.0;
    }
    p
}

/// Layer activation used by the graph layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Identity,
    Elu,
}

fn apply_act(v: Value, act: Act) -> Value {
    match act {
        Act::Identity => v,
        Act::Elu => v.elu(),
    }
}

/// Single-graph convolution with smoothing propagation:
/// `act(P_smooth X W)`. `x`: `[n, d]`, `w`: `[d, d']`.
pub fn gcn_smooth(x: &Value, adj: &Array2<f64>, w: &Value, act: Act) -> AdResult<Value> {
    let p = Value::constant(smooth_operator(adj).into_dyn());
    let out = p.matmul(&x.matmul(w)?)?;
    Ok(apply_act(out, act))
}

/// Single-graph convolution with sharpening propagation:
/// `act((2I - P_smooth) X W)`.
pub fn gala_sharpen(x: &Value, adj: &Array2<f64>, w: &Value, act: Act) -> AdResult<Value> {
    let p = Value::constant(sharpen_operator(adj).into_dyn());
    let out = p.matmul(&x.matmul(w)?)?;
    Ok(apply_act(out, act))
}

/// Batched propagation operators for `S` samples, as `[S, n, n]` constants.
pub struct BatchProps {
    pub smooth: Value,
    pub sharpen: Value,
    pub n_agents: usize,
    pub samples: usize,
}

impl BatchProps {
    /// `alive`: one mask row per sample.
    pub fn from_alive_masks(masks: &[Vec<bool>]) -> Self {
        let s = masks.len();
        let n = masks[0].len();
        let mut smooth = ArrayD::zeros(IxDyn(&[s, n, n]));
        let mut sharpen = ArrayD::zeros(IxDyn(&[s, n, n]));
        for (k, mask) in masks.iter().enumerate() {
            let adj = build_adjacency(mask);
            let ps = smooth_operator(&adj);
            let ph = sharpen_operator(&adj);
            for i in 0..n {
                for j in 0..n {
                    smooth[[k, i, j]] = ps[[i, j]];
                    sharpen[[k, i, j]] = ph[[i, j]];
                }
            }
        }
        Self {
            smooth: Value::constant(smooth),
            sharpen: Value::constant(sharpen),
            n_agents: n,
            samples: s,
        }
    }
}

/// Graph layer over row-batched node features: dense projection shared by
/// all nodes, then per-sample propagation.
pub struct GraphLinear {
    pub lin: Linear,
}

impl GraphLinear {
    fn new(
        ps: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> AdResult<Self> {
        Ok(Self {
            lin: Linear::new(ps, name, in_dim, out_dim, rng)?,
        })
    }

    /// `x`: `[S*n, d]`, `prop`: `[S, n, n]` -> `[S*n, d']`.
    fn forward(&self, x: &Value, prop: &Value, n: usize, act: Act) -> AdResult<Value> {
        let rows = x.shape()[0];
        let s = rows / n;
        let proj = self.lin.forward(x)?;
        let d_out = proj.shape()[1];
        let out = prop
            .bmm(&proj.reshape(&[s, n, d_out])?)?
            .reshape(&[s * n, d_out])?;
        Ok(apply_act(out, act))
    }
}

/// Per-timestep latent state: node means, node log-variances and the
/// concatenated mean vector consumed by the mixer.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
    pub s_tilde: Vec<f64>,
}

/// Batched inference outputs (graph nodes live on the autodiff graph).
pub struct InferenceOutput {
    /// `[S*n, N]` node means.
    pub mu: Value,
    /// `[S*n, N]` node log-variances, clamped to [-10, 10].
    pub log_var: Value,
    /// `[S, n*N]` concatenated node means: the latent state.
    pub s_tilde: Value,
    /// `[S*n, in_dim]` reconstruction of the hidden outputs.
    pub h_recon: Value,
}

/// GALA-style variational graph auto-encoder: smoothing encoder, symmetric
/// sharpening decoder, feature (not adjacency) reconstruction.
pub struct GalaVgae {
    pub n_agents: usize,
    pub in_dim: usize,
    pub embed: usize,
    pub latent: usize,
    enc1: GraphLinear,
    enc_mu: GraphLinear,
    enc_log_var: GraphLinear,
    dec1: GraphLinear,
    dec2: GraphLinear,
}

pub const LOG_VAR_CLAMP: f64 = 10.0;

impl GalaVgae {
    pub fn new(
        ps: &mut ParameterSet,
        n_agents: usize,
        in_dim: usize,
        embed: usize,
        latent: usize,
        rng: &mut ChaCha8Rng,
    ) -> AdResult<Self> {
        Ok(Self {
            n_agents,
            in_dim,
            embed,
            latent,
            enc1: GraphLinear::new(ps, "vgae/enc1", in_dim, embed, rng)?,
            enc_mu: GraphLinear::new(ps, "vgae/enc_mu", embed, latent, rng)?,
            enc_log_var: GraphLinear::new(ps, "vgae/enc_log_var", embed, latent, rng)?,
            dec1: GraphLinear::new(ps, "vgae/dec1", latent, embed, rng)?,
            dec2: GraphLinear::new(ps, "vgae/dec2", embed, in_dim, rng)?,
        })
    }

    /// Batched inference over `S = rows / n_agents` samples.
    ///
    /// The hidden set must be target-sourced. During training a noise array
    /// `[S*n, latent]` drives the reparameterized decoder input
    /// `z = mu + sigma * eps`; at evaluation `z = mu`. The latent state is
    /// always the concatenation of node means, never a sample.
    pub fn infer(
        &self,
        h: &AgentHiddenSet,
        props: &BatchProps,
        noise: Option<&Arr>,
    ) -> Result<InferenceOutput, InferenceError> {
        if h.source != HiddenSource::Target {
            return Err(InferenceError::OnlineHiddenRejected);
        }
        Ok(self
            .infer_value(&Value::constant(h.data.clone()), props, noise)
            .expect("inference dims are fixed by construction"))
    }

    /// Graph-building core shared by training and evaluation paths.
    pub fn infer_value(
        &self,
        h: &Value,
        props: &BatchProps,
        noise: Option<&Arr>,
    ) -> AdResult<InferenceOutput> {
        let n = self.n_agents;
        let rows = h.shape()[0];
        let s = rows / n;
        let e = self.enc1.forward(h, &props.smooth, n, Act::Elu)?;
        let mu = self.enc_mu.forward(&e, &props.smooth, n, Act::Identity)?;
        let log_var = self
            .enc_log_var
            .forward(&e, &props.smooth, n, Act::Identity)?
            .clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        let z = match noise {
            Some(eps) => {
                let sigma = log_var.scale(0.5).exp();
                mu.add(&sigma.mul(&Value::constant(eps.clone()))?)?
            }
            None => mu.clone(),
        };
        let d = self.dec1.forward(&z, &props.sharpen, n, Act::Elu)?;
        let h_recon = self.dec2.forward(&d, &props.sharpen, n, Act::Identity)?;
        let s_tilde = mu.reshape(&[s, n * self.latent])?;
        Ok(InferenceOutput {
            mu,
            log_var,
            s_tilde,
            h_recon,
        })
    }

    /// Single-timestep inference (evaluation mode): hidden matrix `[n, in]`
    /// and an aliveness mask.
    pub fn infer_one(
        &self,
        h: &AgentHiddenSet,
        alive: &[bool],
    ) -> Result<(LatentState, Array2<f64>), InferenceError> {
        let props = BatchProps::from_alive_masks(&[alive.to_vec()]);
        let out = self.infer(h, &props, None)?;
        let mu = out
            .mu
            .data_clone()
            .into_dimensionality()
            .expect("2-D node means");
        let log_var = out
            .log_var
            .data_clone()
            .into_dimensionality()
            .expect("2-D log variances");
        let s_tilde = out.s_tilde.data_clone().iter().cloned().collect();
        let h_recon = out
            .h_recon
            .data_clone()
            .into_dimensionality()
            .expect("2-D reconstruction");
        Ok((
            LatentState {
                mu,
                log_var,
                s_tilde,
            },
            h_recon,
        ))
    }
}

/// Outputs of the prior model.
pub struct PriorOutput {
    /// `[S, n*N]` prior means.
    pub mu: Value,
    /// `[S, n*N]` prior log-variances, clamped.
    pub log_var: Value,
    /// `[S, n*N]` reconstruction of the previous latent state.
    pub state_recon: Value,
    /// Per-agent action logits, each `[S, n_actions]`.
    pub action_logits: Vec<Value>,
}

/// Learned latent prior p(s_t | s_{t-1}, u_{t-1}) as a standard VAE.
///
/// Actions enter through a learned embedding table rather than one-hots;
/// the decoder reconstructs the previous latent state with a shared trunk
/// and the previous actions with one head per agent.
pub struct PriorModel {
    pub n_agents: usize,
    pub n_actions: usize,
    pub latent: usize,
    pub action_embed: usize,
    pub embed_table: Value,
    enc1: Linear,
    enc_mu: Linear,
    enc_log_var: Linear,
    dec1: Linear,
    dec_state: Linear,
    dec_actions: Vec<Linear>,
}

impl PriorModel {
    pub fn new(
        ps: &mut ParameterSet,
        n_agents: usize,
        n_actions: usize,
        latent: usize,
        embed: usize,
        action_embed: usize,
        rng: &mut ChaCha8Rng,
    ) -> AdResult<Self> {
        let full = n_agents * latent;
        let embed_table = Value::param(crate::nn::init_uniform(
            rng,
            &[n_actions, action_embed],
            n_actions,
        ));
        ps.insert("prior/action_embed", embed_table.clone(), true)?;
        let enc1 = Linear::new(ps, "prior/enc1", full + n_agents * action_embed, embed, rng)?;
        let enc_mu = Linear::new(ps, "prior/enc_mu", embed, full, rng)?;
        let enc_log_var = Linear::new(ps, "prior/enc_log_var", embed, full, rng)?;
        let dec1 = Linear::new(ps, "prior/dec1", full, embed, rng)?;
        let dec_state = Linear::new(ps, "prior/dec_state", embed, full, rng)?;
        let mut dec_actions = Vec::with_capacity(n_agents);
        for a in 0..n_agents {
            dec_actions.push(Linear::new(
                ps,
                &format!("prior/dec_action_{a}"),
                embed,
                n_actions,
                rng,
            )?);
        }
        Ok(Self {
            n_agents,
            n_actions,
            latent,
            action_embed,
            embed_table,
            enc1,
            enc_mu,
            enc_log_var,
            dec1,
            dec_state,
            dec_actions,
        })
    }

    /// `s_prev`: `[S, n*N]` previous latent states (constants: the temporal
    /// chain is cut here); `u_prev`: previous action index per (sample,
    /// agent), row-major, length `S*n`; `noise`: `[S, n*N]` for training.
    pub fn forward(
        &self,
        s_prev: &Value,
        u_prev: &[usize],
        noise: Option<&Arr>,
    ) -> AdResult<PriorOutput> {
        let s = s_prev.shape()[0];
        let emb = self
            .embed_table
            .gather_rows(u_prev)?
            .reshape(&[s, self.n_agents * self.action_embed])?;
        let x = Value::concat(&[s_prev.clone(), emb], 1)?;
        let e = self.enc1.forward(&x)?.elu();
        let mu = self.enc_mu.forward(&e)?;
        let log_var = self
            .enc_log_var
            .forward(&e)?
            .clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        let z = match noise {
            Some(eps) => {
                let sigma = log_var.scale(0.5).exp();
                mu.add(&sigma.mul(&Value::constant(eps.clone()))?)?
            }
            None => mu.clone(),
        };
        let d = self.dec1.forward(&z)?.elu();
        let state_recon = self.dec_state.forward(&d)?;
        let action_logits = self
            .dec_actions
            .iter()
            .map(|head| head.forward(&d))
            .collect::<AdResult<Vec<_>>>()?;
        Ok(PriorOutput {
            mu,
            log_var,
            state_recon,
            action_logits,
        })
    }
}

// ---- divergences and likelihood pieces ----

/// Elementwise KL contributions between diagonal Gaussians given as
/// (mean, log-variance) arrays of identical shape:
/// `0.5 * (lv2 - lv1 + exp(lv1 - lv2) + (mu1 - mu2)^2 exp(-lv2) - 1)`.
pub fn kl_diag_gaussian_parts(
    mu1: &Value,
    log_var1: &Value,
    mu2: &Value,
    log_var2: &Value,
) -> AdResult<Value> {
    crate::autodiff::kl_diag_elements(mu1, log_var1, mu2, log_var2)
}

/// Closed-form KL between diagonal Gaussians, summed over dimensions and
/// averaged over the batch (first axis).
pub fn kl_diag_gaussian(
    mu1: &Value,
    log_var1: &Value,
    mu2: &Value,
    log_var2: &Value,
) -> AdResult<Value> {
    let parts = kl_diag_gaussian_parts(mu1, log_var1, mu2, log_var2)?;
    let per_sample = parts.sum_axis(1)?;
    Ok(per_sample.mean_all())
}

/// Log-softmax over the last axis, stable under large logits (the shift by
/// the detached row max cancels exactly in the result).
pub fn log_softmax_last(logits: &Value) -> AdResult<Value> {
    let shape = logits.shape();
    let rows = shape[0];
    let data = logits.data_clone();
    let maxes = ArrayD::from_shape_vec(
        IxDyn(&[rows, 1]),
        data.axis_iter(Axis(0))
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    )
    .expect("row maxes");
    let shifted = logits.sub(&Value::constant(maxes))?;
    let lse = shifted.exp().sum_axis(1)?.log().reshape(&[rows, 1])?;
    shifted.sub(&lse)
}

/// Per-row cross-entropy of integer targets under `logits`: `[S, k]` and
/// targets of length `S` give `[S, 1]` losses.
pub fn cross_entropy_rows(logits: &Value, targets: &[usize]) -> AdResult<Value> {
    Ok(log_softmax_last(logits)?.gather_last(targets)?.neg())
}
