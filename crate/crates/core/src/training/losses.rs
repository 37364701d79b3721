//! Batched loss assembly: the TD objective plus, for the latent-state
//! algorithm, the prior and inference losses, all masked means over filled
//! steps.
//!
//! Stop-gradient boundaries: TD targets `y` are constants during backward;
//! the previous latent state entering the prior is a constant (the temporal
//! chain is cut); the hidden outputs consumed by inference come from the
//! frozen target agents. [`FrozenTargets`] captures exactly these detached
//! quantities so a finite-difference check can re-evaluate the loss as the
//! same function of the parameters.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::agents::{AgentHiddenSet, HiddenSource};
use crate::autodiff::{AdResult, Arr, Value};
use crate::inference::{cross_entropy_rows, kl_diag_gaussian_parts, BatchProps};
use crate::mixing::{vdn_mix, StateSource};

use super::{EpisodeBatch, ModelSet};

/// Pre-drawn reparameterization noise for one gradient step.
pub struct StepNoise {
    /// `[T*B*n, latent]` for the graph auto-encoder decoder input.
    pub vgae: Option<Arr>,
    /// `[T*B, n*latent]` for the prior decoder input.
    pub prior: Option<Arr>,
}

impl StepNoise {
    pub fn none() -> Self {
        Self {
            vgae: None,
            prior: None,
        }
    }
}

/// Detached quantities of one loss evaluation.
#[derive(Debug, Clone)]
pub struct FrozenTargets {
    /// TD targets `[B, T]`.
    pub y: Array2<f64>,
    /// Previous latent states fed to the prior, `[T*B, n*latent]`.
    pub s_prev: Option<Array2<f64>>,
}

/// Loss terms as live graph nodes.
pub struct LossValues {
    pub td: Value,
    pub kl_prior: Option<Value>,
    pub recon_prior: Option<Value>,
    pub kl: Option<Value>,
    pub recon: Option<Value>,
    pub total: Value,
}

/// Scalar loss report for metrics and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub td: f64,
    pub kl_prior: Option<f64>,
    pub recon_prior: Option<f64>,
    pub kl: Option<f64>,
    pub recon: Option<f64>,
    pub total: f64,
}

impl LossValues {
    pub fn report(&self) -> LossReport {
        LossReport {
            td: self.td.item(),
            kl_prior: self.kl_prior.as_ref().map(Value::item),
            recon_prior: self.recon_prior.as_ref().map(Value::item),
            kl: self.kl.as_ref().map(Value::item),
            recon: self.recon.as_ref().map(Value::item),
            total: self.total.item(),
        }
    }
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        let opt = |v: &Option<f64>| v.map(f64::is_finite).unwrap_or(true);
        self.td.is_finite()
            && self.total.is_finite()
            && opt(&self.kl_prior)
            && opt(&self.recon_prior)
            && opt(&self.kl)
            && opt(&self.recon)
    }
}

/// Masked mean over row samples: `sum(x * mask) / count`.
pub fn masked_mean_rows(per_sample: &Value, mask: &Value, count: f64) -> AdResult<Value> {
    Ok(per_sample.mul(mask)?.sum_all().scale(1.0 / count))
}

struct UnrolledNet {
    /// Per `t`: Q values `[B*n, n_actions]`.
    q: Vec<Value>,
    /// Per `t`: hidden outputs `[B*n, hidden]`.
    h: Vec<Value>,
}

/// Unroll one agent network over the whole batch. The input projection of
/// every timestep is computed in one pass; the recurrence walks timesteps.
fn unroll_agent(
    net: &crate::agents::AgentNetwork,
    batch: &EpisodeBatch,
) -> AdResult<UnrolledNet> {
    let rows_per_t = batch.b * batch.n_agents;
    let t_max = batch.t_max;
    let in_dim = net.input_dim();
    let mut x_all = Array2::zeros((t_max * rows_per_t, in_dim));
    for t in 0..t_max {
        let x_t = net.build_input_rows(&batch.obs[t], &batch.last_actions[t]);
        for r in 0..rows_per_t {
            for j in 0..in_dim {
                x_all[[t * rows_per_t + r, j]] = x_t[[r, j]];
            }
        }
    }
    let x_all = Value::constant(x_all.into_dyn());
    let embedded = net.embed.forward(&x_all)?.relu();
    let projected = net.gru.project_input(&embedded)?;
    let mut h = Value::constant(ArrayD::zeros(IxDyn(&[rows_per_t, net.hidden])));
    let mut qs = Vec::with_capacity(t_max);
    let mut hs = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let xp_t = projected.slice_axis(0, t * rows_per_t..(t + 1) * rows_per_t)?;
        h = net.gru.step_with_projected(&xp_t, &h)?;
        let q = net.head.forward(&h)?;
        qs.push(q);
        hs.push(h.clone());
    }
    Ok(UnrolledNet { q: qs, h: hs })
}

/// Per-agent maximum over available actions (data path, for TD targets).
fn masked_max_rows(q: &Arr, avail: &[Vec<bool>]) -> Array2<f64> {
    let rows = q.shape()[0];
    let cols = q.shape()[1];
    let mut out = Array2::zeros((rows, 1));
    for r in 0..rows {
        let mut best = f64::NEG_INFINITY;
        for c in 0..cols {
            if avail[r][c] && q[[r, c]] > best {
                best = q[[r, c]];
            }
        }
        out[[r, 0]] = best;
    }
    out
}

/// Compute every loss term for one batch.
///
/// With `frozen` absent, the detached quantities are computed from the
/// current parameters and returned; passing them back re-evaluates the loss
/// as the identical function of the parameters (finite-difference mode).
pub fn compute_losses(
    models: &ModelSet,
    batch: &EpisodeBatch,
    gamma: f64,
    noise: &StepNoise,
    frozen: Option<&FrozenTargets>,
) -> AdResult<(LossValues, FrozenTargets)> {
    let b = batch.b;
    let n = batch.n_agents;
    let t_max = batch.t_max;
    let rows_per_t = b * n;
    let samples = t_max * b;
    let source = models.algorithm.state_source();
    let count = batch.filled_count().max(1.0);
    let mask = Value::constant(batch.fill_column().into_dyn());

    // ---- agent unrolls ----
    let online = unroll_agent(&models.agent, batch)?;
    let target = unroll_agent(&models.agent_target, batch)?;
    let q_target_data: Vec<Arr> = target.q.iter().map(Value::data_clone).collect();
    let h_target_data: Vec<Arr> = target.h.iter().map(Value::data_clone).collect();
    drop(target);

    // ---- latent inference (side only) ----
    let mut s_tilde_live: Option<Value> = None; // [T*B, n*latent]
    let mut s_tilde_data: Option<Array2<f64>> = None;
    let mut infer_out = None;
    let mut h_all_data: Option<Arr> = None;
    if let Some(vgae) = &models.vgae {
        let mut h_all = Array2::zeros((samples * n, models.agent.hidden));
        for t in 0..t_max {
            for r in 0..rows_per_t {
                for j in 0..models.agent.hidden {
                    h_all[[t * rows_per_t + r, j]] = h_target_data[t][[r, j]];
                }
            }
        }
        let masks: Vec<Vec<bool>> = (0..t_max)
            .flat_map(|t| batch.alive[t].iter().cloned())
            .collect();
        let props = BatchProps::from_alive_masks(&masks);
        let h_all = h_all.into_dyn();
        let hidden_set = AgentHiddenSet::new(h_all.clone(), n, HiddenSource::Target);
        let out = vgae
            .infer(&hidden_set, &props, noise.vgae.as_ref())
            .expect("target-sourced by construction");
        let s_data = out
            .s_tilde
            .data_clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-D latent state");
        s_tilde_live = Some(out.s_tilde.clone());
        s_tilde_data = Some(s_data);
        infer_out = Some(out);
        h_all_data = Some(h_all);
    }

    // ---- per-step mixer states ----
    // online side (live), target side (data)
    let online_state_t = |t: usize| -> AdResult<Option<Value>> {
        Ok(match source {
            StateSource::None => None,
            StateSource::TrueState => Some(Value::constant(
                batch.true_states[t].clone().into_dyn(),
            )),
            StateSource::ObsConcat => Some(Value::constant(
                batch.obs[t]
                    .clone()
                    .into_dyn()
                    .to_shape(IxDyn(&[b, n * batch.obs_dim]))
                    .expect("row-major reshape")
                    .into_owned(),
            )),
            StateSource::HiddenConcat => {
                Some(online.h[t].reshape(&[b, n * models.agent.hidden])?)
            }
            StateSource::SideLatent => Some(
                s_tilde_live
                    .as_ref()
                    .expect("side latent present")
                    .slice_axis(0, t * b..(t + 1) * b)?,
            ),
        })
    };
    let target_state_t = |t: usize| -> Option<Arr> {
        match source {
            StateSource::None => None,
            StateSource::TrueState => Some(batch.true_states[t].clone().into_dyn()),
            StateSource::ObsConcat => Some(
                batch.obs[t]
                    .clone()
                    .into_dyn()
                    .to_shape(IxDyn(&[b, n * batch.obs_dim]))
                    .expect("row-major reshape")
                    .into_owned(),
            ),
            StateSource::HiddenConcat => Some(
                h_target_data[t]
                    .to_shape(IxDyn(&[b, n * models.agent.hidden]))
                    .expect("row-major reshape")
                    .into_owned(),
            ),
            StateSource::SideLatent => {
                let s = s_tilde_data.as_ref().expect("side latent present");
                let mut out = Array2::zeros((b, s.ncols()));
                for e in 0..b {
                    out.row_mut(e).assign(&s.row(t * b + e));
                }
                Some(out.into_dyn())
            }
        }
    };

    // ---- online Q_tot over all steps ----
    let mut qtot_parts = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let chosen = online.q[t]
            .gather_last(&batch.actions[t])?
            .reshape(&[b, n])?;
        let qtot = match (&models.mixer, online_state_t(t)?) {
            (Some(mixer), Some(state)) => mixer.mix(&chosen, &state)?,
            _ => vdn_mix(&chosen)?,
        };
        qtot_parts.push(qtot);
    }
    let qtot_all = Value::concat(&qtot_parts, 0)?; // [T*B, 1]

    // ---- TD targets ----
    let y = match frozen {
        Some(f) => f.y.clone(),
        None => {
            // greedy target Q_tot at every step, then one-step backup
            let mut qtot_target = Array2::zeros((b, t_max));
            for t in 0..t_max {
                let best = masked_max_rows(&q_target_data[t], &batch.avail[t]);
                let best = best
                    .to_shape((b, n))
                    .expect("row-major reshape")
                    .into_owned();
                let qt = match (&models.mixer_target, target_state_t(t)) {
                    (Some(mixer), Some(state)) => {
                        let qv = Value::constant(best.into_dyn());
                        let sv = Value::constant(state);
                        mixer.mix(&qv, &sv)?.data_clone()
                    }
                    _ => {
                        let qv = Value::constant(best.into_dyn());
                        vdn_mix(&qv)?.data_clone()
                    }
                };
                for e in 0..b {
                    qtot_target[[e, t]] = qt[[e, 0]];
                }
            }
            let mut y = Array2::zeros((b, t_max));
            for e in 0..b {
                for t in 0..t_max {
                    let r = batch.rewards[[e, t]];
                    let terminal = batch.terminated[[e, t]] > 0.5
                        || t + 1 >= t_max
                        || batch.filled[[e, t + 1]] < 0.5;
                    y[[e, t]] = if terminal {
                        r
                    } else {
                        r + gamma * qtot_target[[e, t + 1]]
                    };
                }
            }
            y
        }
    };
    let mut y_col = Array2::zeros((samples, 1));
    for t in 0..t_max {
        for e in 0..b {
            y_col[[t * b + e, 0]] = y[[e, t]];
        }
    }
    let td = masked_mean_rows(
        &qtot_all.sub(&Value::constant(y_col.into_dyn()))?.square()?,
        &mask,
        count,
    )?;

    // ---- latent-state losses ----
    let (mut kl_prior, mut recon_prior, mut kl, mut recon) = (None, None, None, None);
    let mut s_prev_arr: Option<Array2<f64>> = None;
    if let (Some(prior), Some(out)) = (&models.prior, &infer_out) {
        let latent_full = models.agent.hidden; // in_dim of vgae
        let n_latent = out.mu.shape()[1];
        let full = n * n_latent;
        // previous latent state (constant input: the temporal chain is cut)
        let s_prev = match frozen {
            Some(f) => f
                .s_prev
                .clone()
                .expect("frozen targets carry s_prev for the latent algorithm"),
            None => {
                let s_data = s_tilde_data.as_ref().expect("latent data");
                let mut sp = Array2::zeros((samples, full));
                for t in 1..t_max {
                    for e in 0..b {
                        sp.row_mut(t * b + e).assign(&s_data.row((t - 1) * b + e));
                    }
                }
                sp
            }
        };
        // previous joint action, no-op (index 0) at episode starts
        let mut u_prev = vec![0usize; samples * n];
        for t in 1..t_max {
            for r in 0..rows_per_t {
                u_prev[t * rows_per_t + r] = batch.actions[t - 1][r];
            }
        }
        let s_prev_v = Value::constant(s_prev.clone().into_dyn());
        let p_out = prior.forward(&s_prev_v, &u_prev, noise.prior.as_ref())?;

        let zeros = Value::constant(ArrayD::zeros(IxDyn(&[samples, full])));
        let klp_parts = kl_diag_gaussian_parts(&p_out.mu, &p_out.log_var, &zeros, &zeros)?;
        let klp = klp_parts.sum_axis(1)?.reshape(&[samples, 1])?;
        kl_prior = Some(masked_mean_rows(&klp, &mask, count)?);

        let mse_s = p_out
            .state_recon
            .sub(&s_prev_v)?
            .square()?
            .sum_axis(1)?
            .scale(1.0 / full as f64)
            .reshape(&[samples, 1])?;
        let mut ce_sum: Option<Value> = None;
        for (a, logits) in p_out.action_logits.iter().enumerate() {
            let targets: Vec<usize> = (0..samples).map(|s| u_prev[s * n + a]).collect();
            let ce = cross_entropy_rows(logits, &targets)?;
            ce_sum = Some(match ce_sum {
                Some(acc) => acc.add(&ce)?,
                None => ce,
            });
        }
        let ce_mean = ce_sum.expect("at least one agent").scale(1.0 / n as f64);
        recon_prior = Some(masked_mean_rows(&mse_s.add(&ce_mean)?, &mask, count)?);

        let q_mu = out.mu.reshape(&[samples, full])?;
        let q_lv = out.log_var.reshape(&[samples, full])?;
        let klq_parts = kl_diag_gaussian_parts(&q_mu, &q_lv, &p_out.mu, &p_out.log_var)?;
        let klq = klq_parts.sum_axis(1)?.reshape(&[samples, 1])?;
        kl = Some(masked_mean_rows(&klq, &mask, count)?);

        let h_const = Value::constant(h_all_data.clone().expect("hidden data"));
        let sq = out.h_recon.sub(&h_const)?.square()?;
        let per_row = sq.sum_axis(1)?.reshape(&[samples, n])?;
        let per_sample = per_row
            .sum_axis(1)?
            .scale(1.0 / (n * latent_full) as f64)
            .reshape(&[samples, 1])?;
        recon = Some(masked_mean_rows(&per_sample, &mask, count)?);
        s_prev_arr = Some(s_prev);
    }

    let mut total = td.clone();
    for term in [&kl_prior, &recon_prior, &kl, &recon].into_iter().flatten() {
        total = total.add(term)?;
    }

    Ok((
        LossValues {
            td,
            kl_prior,
            recon_prior,
            kl,
            recon,
            total,
        },
        FrozenTargets {
            y,
            s_prev: s_prev_arr,
        },
    ))
}

/// Realized surrogate of each evidence-lower-bound term on one batch:
/// masked batch-mean reward, the reconstruction surrogate (negative
/// reconstruction loss), the negative KL term, and the constant
/// action-prior term (uniform prior: reported as zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    pub reward_term: f64,
    pub action_prior_term: f64,
    pub reconstruction_term: f64,
    pub kl_term: f64,
}

pub fn elbo_report(
    models: &ModelSet,
    batch: &EpisodeBatch,
    gamma: f64,
    noise: &StepNoise,
) -> AdResult<ElboReport> {
    let count = batch.filled_count().max(1.0);
    let mut reward_sum = 0.0;
    for t in 0..batch.t_max {
        for e in 0..batch.b {
            reward_sum += batch.rewards[[e, t]] * batch.filled[[e, t]];
        }
    }
    let (losses, _) = compute_losses(models, batch, gamma, noise, None)?;
    Ok(ElboReport {
        reward_term: reward_sum / count,
        action_prior_term: 0.0,
        reconstruction_term: losses.recon.as_ref().map(Value::item).map(|x| -x).unwrap_or(0.0),
        kl_term: losses.kl.as_ref().map(Value::item).map(|x| -x).unwrap_or(0.0),
    })
}
