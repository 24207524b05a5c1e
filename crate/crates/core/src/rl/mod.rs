//! Advantage actor-critic fine-tuning with the joint distillation
//! objective, the reward-shaping penalty and the inverse-dynamics
//! pseudo-labeling baseline.

mod inverse;
mod train;

pub use inverse::{
    behavior_clone, pseudo_label, transition_ambiguity, train_inverse_model, BcConfig, InverseConfig, InverseModel,
    InverseReport,
};
pub use train::{
    eval_seeds, evaluate_greedy, greedy_action, train, MetricsRow, Prerequisites, TrainConfig, TrainOutcome, UpdateStats,
    Variant, METRICS_HEADER,
};

use crate::demos::DemoError;
use crate::env::{EnvError, Observation, N_ACTIONS};
use crate::model::{
    distill_loss, encode, policy_logits, value, DistillMetric, ModelConfig, ModelError, TeacherSnapshot,
};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::pretrain::PretrainError;

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("empty batch")]
    Empty,
    #[error("action index {0} outside the action space")]
    Action(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(&'static str),
    #[error("store is not labeled")]
    Unlabeled,
    #[error("vocabulary hash mismatch: store {store:016x}, inverse model {model:016x}")]
    VocabHash { store: u64, model: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Value-loss weight.
    pub alpha_v: f64,
    /// Distillation weight.
    pub alpha_d: f64,
    /// Entropy-bonus weight.
    pub beta_h: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_v: 0.5,
            alpha_d: 1.0,
            beta_h: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), RlError> {
        for (name, v) in [("alpha_v", self.alpha_v), ("alpha_d", self.alpha_d), ("beta_h", self.beta_h)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RlError::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// One actor step: the observation acted on, the action, the reward that
/// followed it and whether the episode ended there.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub observation: Observation,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    /// Behavior log-probability of `action`.
    pub log_prob: f64,
    /// Behavior value estimate of `observation`.
    pub value: f64,
}

/// A `U`-step unroll of one actor.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub steps: Vec<RolloutStep>,
    /// `V` of the observation following the last step.
    pub bootstrap_value: f64,
}

impl RolloutBatch {
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let rewards: Vec<f64> = self.steps.iter().map(|s| s.reward).collect();
        let dones: Vec<bool> = self.steps.iter().map(|s| s.done).collect();
        compute_returns(&rewards, &dones, gamma, self.bootstrap_value)
    }
}

/// `G_t = r_{t+1} + gamma * G_{t+1}`, seeded with `bootstrap_value` past
/// the last step and cut to zero after a step with `done` set.
pub fn compute_returns(rewards: &[f64], dones: &[bool], gamma: f64, bootstrap_value: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), dones.len(), "rewards and dones must align");
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap_value;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            next = 0.0;
        }
        next = rewards[t] + gamma * next;
        out[t] = next;
    }
    out
}

/// Graph nodes of the actor-critic objective.
#[derive(Debug, Clone, Copy)]
pub struct AcTerms {
    pub rep: Var,
    /// Surrogate `mean(A * log pi(a|s))` with the advantage detached.
    pub j_pi: Var,
    /// `mean(0.5 * (G - V)^2)`.
    pub j_v: Var,
    /// Mean policy entropy.
    pub entropy: Var,
    /// `-J_pi + alpha_V * J_V - beta_H * H`.
    pub total: Var,
}

fn flatten(batch: &[RolloutBatch], gamma: f64) -> Result<(Vec<&Observation>, Vec<usize>, Vec<f64>), RlError> {
    let n: usize = batch.iter().map(|b| b.steps.len()).sum();
    if n == 0 {
        return Err(RlError::Empty);
    }
    let mut obs = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut returns = Vec::with_capacity(n);
    for b in batch {
        returns.extend(b.returns(gamma));
        for s in &b.steps {
            if s.action >= N_ACTIONS {
                return Err(RlError::Action(s.action));
            }
            obs.push(&s.observation);
            actions.push(s.action);
        }
    }
    Ok((obs, actions, returns))
}

/// Actor-critic loss over every step of `batch`, with values recomputed
/// under the parameters on `g`.
pub fn actor_critic_loss(
    cfg: &ModelConfig,
    g: &mut Graph<'_>,
    batch: &[RolloutBatch],
    gamma: f64,
    weights: &LossWeights,
) -> Result<AcTerms, RlError> {
    let (obs, actions, returns) = flatten(batch, gamma)?;
    let rep = encode(cfg, g, &obs)?;
    actor_critic_terms(g, rep, &actions, returns, weights, None)
}

/// `G_t - V(s_t)` for every step of `batch` under `model`, in step order.
pub fn advantages(model: &crate::model::Model, batch: &[RolloutBatch], gamma: f64) -> Result<Vec<f64>, RlError> {
    let (obs, _, returns) = flatten(batch, gamma)?;
    let mut g = model.graph();
    let rep = encode(&model.config, &mut g, &obs)?;
    let v = value(&mut g, rep)?;
    Ok(returns.iter().zip(g.value(v).data()).map(|(r, v)| r - v).collect())
}

/// [`actor_critic_loss`] with the advantage supplied as a constant. At the
/// parameters `advantage` was computed under, value and gradient coincide
/// with [`actor_critic_loss`]; away from them this is the function whose
/// derivative the stop-gradient defines.
pub fn actor_critic_loss_fixed(
    cfg: &ModelConfig,
    g: &mut Graph<'_>,
    batch: &[RolloutBatch],
    gamma: f64,
    weights: &LossWeights,
    advantage: &[f64],
) -> Result<AcTerms, RlError> {
    let (obs, actions, returns) = flatten(batch, gamma)?;
    if advantage.len() != actions.len() {
        return Err(RlError::Config(format!(
            "{} advantages for {} steps",
            advantage.len(),
            actions.len()
        )));
    }
    let rep = encode(cfg, g, &obs)?;
    actor_critic_terms(g, rep, &actions, returns, weights, Some(advantage))
}

fn actor_critic_terms(
    g: &mut Graph<'_>,
    rep: Var,
    actions: &[usize],
    returns: Vec<f64>,
    weights: &LossWeights,
    fixed: Option<&[f64]>,
) -> Result<AcTerms, RlError> {
    let logits = policy_logits(g, rep)?;
    let logp = g.log_softmax_last(logits)?;
    let probs = g.softmax_last(logits)?;
    let logp_a = g.gather(logp, actions)?;
    let v = value(g, rep)?;
    let g_t = g.constant(Tensor::from_vec(returns));
    let diff = g.sub(g_t, v)?;
    let adv = match fixed {
        Some(a) => g.constant(Tensor::from_vec(a.to_vec())),
        None => g.detach(diff),
    };
    let pg = g.mul(adv, logp_a)?;
    let j_pi = g.mean(pg)?;
    let sq = g.mul(diff, diff)?;
    let msq = g.mean(sq)?;
    let j_v = g.scale(msq, 0.5)?;
    let plogp = g.mul(probs, logp)?;
    let row = g.sum_last(plogp)?;
    let neg_h = g.mean(row)?;
    let entropy = g.scale(neg_h, -1.0)?;

    let a = g.scale(j_pi, -1.0)?;
    let b = g.scale(j_v, weights.alpha_v)?;
    let c = g.scale(entropy, -weights.beta_h)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(AcTerms {
        rep,
        j_pi,
        j_v,
        entropy,
        total,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct JointTerms {
    pub ac: AcTerms,
    /// Distillation term, present whenever a teacher is given.
    pub j_d: Option<Var>,
    pub total: Var,
}

/// `J_ac + alpha_d * J_d`, with `J_d` averaged over the observations of
/// `batch`. With `alpha_d == 0` or no teacher the total is the
/// actor-critic node itself.
pub fn joint_loss(
    cfg: &ModelConfig,
    g: &mut Graph<'_>,
    batch: &[RolloutBatch],
    gamma: f64,
    teacher: Option<&TeacherSnapshot>,
    weights: &LossWeights,
    metric: DistillMetric,
) -> Result<JointTerms, RlError> {
    joint_terms(cfg, g, batch, gamma, teacher, weights, metric, None)
}

/// [`joint_loss`] with a constant advantage, as in [`actor_critic_loss_fixed`].
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_fixed(
    cfg: &ModelConfig,
    g: &mut Graph<'_>,
    batch: &[RolloutBatch],
    gamma: f64,
    teacher: Option<&TeacherSnapshot>,
    weights: &LossWeights,
    metric: DistillMetric,
    advantage: &[f64],
) -> Result<JointTerms, RlError> {
    joint_terms(cfg, g, batch, gamma, teacher, weights, metric, Some(advantage))
}

#[allow(clippy::too_many_arguments)]
fn joint_terms(
    cfg: &ModelConfig,
    g: &mut Graph<'_>,
    batch: &[RolloutBatch],
    gamma: f64,
    teacher: Option<&TeacherSnapshot>,
    weights: &LossWeights,
    metric: DistillMetric,
    fixed: Option<&[f64]>,
) -> Result<JointTerms, RlError> {
    let (obs, actions, returns) = flatten(batch, gamma)?;
    if fixed.is_some_and(|a| a.len() != actions.len()) {
        return Err(RlError::Config("advantage length differs from the step count".into()));
    }
    if let Some(t) = teacher {
        if t.config() != cfg {
            return Err(RlError::Model(ModelError::Mismatch(format!(
                "teacher architecture {:?} differs from student {:?}",
                t.config(),
                cfg
            ))));
        }
    }
    let rep = encode(cfg, g, &obs)?;
    let ac = actor_critic_terms(g, rep, &actions, returns, weights, fixed)?;
    let j_d = match teacher {
        Some(t) => Some(distill_loss(g, cfg, rep, &obs, t, metric)?),
        None => None,
    };
    let total = match j_d {
        Some(d) if weights.alpha_d != 0.0 => {
            let wd = g.scale(d, weights.alpha_d)?;
            g.add(ac.total, wd)?
        }
        _ => ac.total,
    };
    Ok(JointTerms { ac, j_d, total })
}

/// `-lambda * (1 - acc)` where `acc` is the per-cell argmax accuracy of the
/// teacher's prediction of `next` from `cur`.
pub fn reward_shaping_penalty(
    teacher: &TeacherSnapshot,
    cur: &Observation,
    next: &Observation,
    lambda: f64,
) -> Result<f64, RlError> {
    Ok(shaping_penalties(teacher, &[(cur, next)], lambda)?[0])
}

/// Batched [`reward_shaping_penalty`].
pub fn shaping_penalties(
    teacher: &TeacherSnapshot,
    pairs: &[(&Observation, &Observation)],
    lambda: f64,
) -> Result<Vec<f64>, RlError> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let cur: Vec<&Observation> = pairs.iter().map(|p| p.0).collect();
    let pred = teacher.predict_next(&cur)?;
    let cells = teacher.config().cells();
    Ok(pairs
        .iter()
        .zip(pred.chunks(cells))
        .map(|((_, next), p)| {
            let hits = p.iter().zip(&next.grid).filter(|(a, &b)| **a == b as usize).count();
            let acc = hits as f64 / cells as f64;
            // adding 0.0 turns a -0.0 penalty into +0.0
            -lambda * (1.0 - acc) + 0.0
        })
        .collect())
}
