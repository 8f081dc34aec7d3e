//! PPO and max-entropy PPO with analytic gradients.
//!
//! The objective maximized on a minibatch is
//!
//! ```text
//! J = mean[min(r A, clip(r, 1-eps, 1+eps) A)] - vf_coef * mean[(V - R)^2] + ent_coef * mean[H(pi)]
//! ```
//!
//! with `r = exp(log pi(a|s) - log pi_old(a|s))`. Gradients are backpropagated
//! by hand through the actor and critic MLPs and applied with Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::StateVector;
use crate::nn::Mlp;
use crate::policy::{entropy, log_softmax, PolicyNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Standard,
    #[default]
    MaxEntropy,
}

/// PPO settings. When deserialized, the `algorithm` preset supplies every
/// field that is not given explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PpoOverrides")]
pub struct PpoConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub n_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_range: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    /// Gradient-norm cap, applied to actor and critic separately.
    pub max_grad_norm: f64,
    pub inference_temperature: f64,
    /// Multiplier applied to rewards before advantage estimation.
    pub reward_scale: f64,
}

impl PpoConfig {
    pub fn standard() -> Self {
        Self {
            algorithm: Algorithm::Standard,
            learning_rate: 3e-4,
            n_steps: 64,
            batch_size: 32,
            epochs: 4,
            clip_range: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            ent_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            inference_temperature: 1.0,
            reward_scale: 0.001,
        }
    }

    pub fn max_entropy() -> Self {
        Self {
            algorithm: Algorithm::MaxEntropy,
            gamma: 0.95,
            gae_lambda: 0.9,
            ent_coef: 0.1,
            inference_temperature: 1.5,
            ..Self::standard()
        }
    }

    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::Standard => Self::standard(),
            Algorithm::MaxEntropy => Self::max_entropy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.n_steps >= 1
            && self.batch_size >= 1
            && self.epochs >= 1
            && self.clip_range > 0.0
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.ent_coef >= 0.0
            && self.vf_coef >= 0.0
            && self.max_grad_norm > 0.0
            && self.inference_temperature > 0.0
            && self.reward_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid PPO configuration {self:?}")))
        }
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            clip_range: self.clip_range,
            vf_coef: self.vf_coef,
            ent_coef: self.ent_coef,
        }
    }
}

/// Preset name plus optional per-field overrides.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoOverrides {
    algorithm: Algorithm,
    learning_rate: Option<f64>,
    n_steps: Option<usize>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    clip_range: Option<f64>,
    gamma: Option<f64>,
    gae_lambda: Option<f64>,
    ent_coef: Option<f64>,
    vf_coef: Option<f64>,
    max_grad_norm: Option<f64>,
    inference_temperature: Option<f64>,
    reward_scale: Option<f64>,
}

impl From<PpoOverrides> for PpoConfig {
    fn from(o: PpoOverrides) -> Self {
        let p = PpoConfig::for_algorithm(o.algorithm);
        PpoConfig {
            algorithm: o.algorithm,
            learning_rate: o.learning_rate.unwrap_or(p.learning_rate),
            n_steps: o.n_steps.unwrap_or(p.n_steps),
            batch_size: o.batch_size.unwrap_or(p.batch_size),
            epochs: o.epochs.unwrap_or(p.epochs),
            clip_range: o.clip_range.unwrap_or(p.clip_range),
            gamma: o.gamma.unwrap_or(p.gamma),
            gae_lambda: o.gae_lambda.unwrap_or(p.gae_lambda),
            ent_coef: o.ent_coef.unwrap_or(p.ent_coef),
            vf_coef: o.vf_coef.unwrap_or(p.vf_coef),
            max_grad_norm: o.max_grad_norm.unwrap_or(p.max_grad_norm),
            inference_temperature: o.inference_temperature.unwrap_or(p.inference_temperature),
            reward_scale: o.reward_scale.unwrap_or(p.reward_scale),
        }
    }
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self::max_entropy()
    }
}

/// One policy decision and the interval-averaged reward it earned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateVector,
    pub action_index: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// Last decision of its episode.
    pub done: bool,
    /// Value credited after a `done` transition: zero when generation really
    /// ended, the critic's estimate of the final state when it was cut off
    /// by the length cap.
    pub end_value: f64,
}

/// Generalized advantage estimation over one uninterrupted segment.
///
/// `delta_t = r_t + gamma * v_{t+1} - v_t` with `v_T = bootstrap_value`,
/// `A_t = delta_t + gamma * lambda * A_{t+1}`, and `returns = A + v`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
    bootstrap_value: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ends = vec![None; rewards.len()];
    compute_gae_episodes(rewards, values, &ends, gamma, lambda, bootstrap_value)
}

/// GAE over consecutive episodes. `ends[t] = Some(v)` closes an episode
/// after `t`; `v` stands in for the next state's value (zero at a true
/// terminal) and advantages do not flow across the boundary.
pub fn compute_gae_episodes(
    rewards: &[f64],
    values: &[f64],
    ends: &[Option<f64>],
    gamma: f64,
    lambda: f64,
    bootstrap_value: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.is_empty() {
        return Err(Error::Empty("reward sequence"));
    }
    if rewards.len() != values.len() || rewards.len() != ends.len() {
        return Err(Error::DimensionMismatch {
            expected: rewards.len(),
            got: values.len().min(ends.len()),
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if let Some(v) = ends[t] {
            (v, 0.0)
        } else if t + 1 == n {
            (bootstrap_value, 0.0)
        } else {
            (values[t + 1], next_adv)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Rescales to zero mean and unit standard deviation (population sd, with a
/// small floor).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let sd = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (sd + 1e-8));
}

/// A transition with its advantage and return filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: StateVector,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Runs GAE over the buffer (rewards scaled by `reward_scale`) and normalizes
/// advantages across the whole batch.
pub fn prepare_batch(transitions: &[Transition], bootstrap_value: f64, cfg: &PpoConfig) -> Result<Vec<Sample>> {
    let rewards: Vec<f64> = transitions.iter().map(|t| t.reward * cfg.reward_scale).collect();
    let values: Vec<f64> = transitions.iter().map(|t| t.value).collect();
    let ends: Vec<Option<f64>> = transitions.iter().map(|t| t.done.then_some(t.end_value)).collect();
    let (mut adv, returns) =
        compute_gae_episodes(&rewards, &values, &ends, cfg.gamma, cfg.gae_lambda, bootstrap_value)?;
    normalize_advantages(&mut adv);
    Ok(transitions
        .iter()
        .zip(adv)
        .zip(returns)
        .map(|((t, advantage), ret)| Sample {
            state: t.state.clone(),
            action: t.action_index,
            old_log_prob: t.log_prob,
            advantage,
            ret,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub clip_range: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// Mean clipped surrogate.
    pub surrogate: f64,
    /// Mean squared value error.
    pub value_loss: f64,
    /// Mean policy entropy.
    pub entropy: f64,
    /// `surrogate - vf_coef * value_loss + ent_coef * entropy`.
    pub total: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Gradients of the objective with respect to both networks.
#[derive(Debug, Clone)]
pub struct ObjectiveGrad {
    pub actor: Mlp,
    pub critic: Mlp,
}

/// Evaluates the objective on `samples` without gradients.
pub fn objective(net: &PolicyNet, samples: &[Sample], w: ObjectiveWeights) -> Result<ObjectiveTerms> {
    evaluate(net, samples, w, None)
}

/// Evaluates the objective and its gradient (ascent direction).
pub fn objective_gradient(
    net: &PolicyNet,
    samples: &[Sample],
    w: ObjectiveWeights,
) -> Result<(ObjectiveTerms, ObjectiveGrad)> {
    let mut grad = ObjectiveGrad {
        actor: net.actor.zeros_like(),
        critic: net.critic.zeros_like(),
    };
    let terms = evaluate(net, samples, w, Some(&mut grad))?;
    Ok((terms, grad))
}

fn evaluate(
    net: &PolicyNet,
    samples: &[Sample],
    w: ObjectiveWeights,
    mut grad: Option<&mut ObjectiveGrad>,
) -> Result<ObjectiveTerms> {
    if samples.is_empty() {
        return Err(Error::Empty("PPO batch"));
    }
    let n = samples.len() as f64;
    let (mut surr, mut vloss, mut ent, mut clipped, mut kl) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in samples {
        if s.state.len() != net.arch.state_dim {
            return Err(Error::DimensionMismatch {
                expected: net.arch.state_dim,
                got: s.state.len(),
            });
        }
        if s.action >= net.arch.n_actions {
            return Err(Error::Contract(format!("action index {} out of range", s.action)));
        }
        let actor_trace = net.actor.trace(&s.state);
        let logp_all = log_softmax(actor_trace.output());
        let probs: Vec<f64> = logp_all.iter().map(|l| l.exp()).collect();
        let logp = logp_all[s.action];
        let log_ratio = logp - s.old_log_prob;
        let ratio = log_ratio.exp();
        let lo = 1.0 - w.clip_range;
        let hi = 1.0 + w.clip_range;
        let unclipped = ratio * s.advantage;
        let clipped_obj = ratio.clamp(lo, hi) * s.advantage;
        let through_ratio = unclipped <= clipped_obj;
        surr += unclipped.min(clipped_obj);
        if !(lo..=hi).contains(&ratio) {
            clipped += 1.0;
        }
        kl += (ratio - 1.0) - log_ratio;
        let h = entropy(&probs);
        ent += h;

        let critic_trace = net.critic.trace(&s.state);
        let v = critic_trace.output()[0];
        vloss += (v - s.ret).powi(2);

        if let Some(g) = grad.as_deref_mut() {
            let surr_scale = if through_ratio { s.advantage * ratio } else { 0.0 };
            let d_logits: Vec<f64> = probs
                .iter()
                .zip(&logp_all)
                .enumerate()
                .map(|(j, (&p, &lp))| {
                    let onehot = if j == s.action { 1.0 } else { 0.0 };
                    let d_surr = surr_scale * (onehot - p);
                    let d_ent = -p * (lp + h);
                    (d_surr + w.ent_coef * d_ent) / n
                })
                .collect();
            net.actor.backward(&actor_trace, &d_logits, &mut g.actor);
            let d_v = -w.vf_coef * 2.0 * (v - s.ret) / n;
            net.critic.backward(&critic_trace, &[d_v], &mut g.critic);
        }
    }
    let surrogate = surr / n;
    let value_loss = vloss / n;
    let entropy = ent / n;
    Ok(ObjectiveTerms {
        surrogate,
        value_loss,
        entropy,
        total: surrogate - w.vf_coef * value_loss + w.ent_coef * entropy,
        clip_fraction: clipped / n,
        approx_kl: kl / n,
    })
}

/// Adam with separate moment buffers for actor and critic.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: ObjectiveGrad,
    v: ObjectiveGrad,
}

impl Adam {
    pub fn new(net: &PolicyNet, lr: f64) -> Self {
        let zeros = || ObjectiveGrad {
            actor: net.actor.zeros_like(),
            critic: net.critic.zeros_like(),
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One ascent step along `grad`.
    pub fn step(&mut self, net: &mut PolicyNet, grad: &ObjectiveGrad) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let pairs = [
            (&mut net.actor, &grad.actor, &mut self.m.actor, &mut self.v.actor),
            (&mut net.critic, &grad.critic, &mut self.m.critic, &mut self.v.critic),
        ];
        for (params, g, m, v) in pairs {
            for (((p, &g), m), v) in params
                .params_mut()
                .zip(g.params())
                .zip(m.params_mut())
                .zip(v.params_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p += self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub before: ObjectiveTerms,
    pub after: ObjectiveTerms,
    pub minibatches: usize,
}

fn clip_norm(g: &mut Mlp, max_norm: f64) {
    let norm = g.sq_norm().sqrt();
    if norm > max_norm {
        g.scale(max_norm / (norm + 1e-6));
    }
}

/// Runs `epochs` passes of shuffled minibatch Adam ascent over `samples`.
pub fn ppo_update(
    net: &mut PolicyNet,
    opt: &mut Adam,
    samples: &[Sample],
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<UpdateReport> {
    if samples.is_empty() {
        return Err(Error::Empty("PPO batch"));
    }
    let w = cfg.weights();
    let before = objective(net, samples, w)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut minibatches = 0;
    let mut mb = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            mb.clear();
            mb.extend(chunk.iter().map(|&i| samples[i].clone()));
            let (_, mut grad) = objective_gradient(net, &mb, w)?;
            if !(grad.actor.all_finite() && grad.critic.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "PPO gradient after {minibatches} minibatches"
                )));
            }
            clip_norm(&mut grad.actor, cfg.max_grad_norm);
            clip_norm(&mut grad.critic, cfg.max_grad_norm);
            opt.step(net, &grad);
            minibatches += 1;
        }
    }
    if !net.all_finite() {
        return Err(Error::NonFinite("policy parameters after update".into()));
    }
    let after = objective(net, samples, w)?;
    Ok(UpdateReport {
        before,
        after,
        minibatches,
    })
}
