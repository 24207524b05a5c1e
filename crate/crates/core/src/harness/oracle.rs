//! Finite-difference checks of the model-level objectives on random small
//! architectures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::env::{generate_split, Action, EpisodeConfig, GridWorld, Observation, SplitSide};
use crate::hash::mix_seed;
use crate::model::{DistillMetric, Model, ModelConfig, TeacherSnapshot};
use crate::numerics::suite::{check_mlp, primitive_suite};
use crate::numerics::{grad_check, relative_error, GradCheckReport, Graph, NumericsError, Var};
use crate::pretrain::dynamics_loss;
use crate::rl::{
    actor_critic_loss, actor_critic_loss_fixed, advantages, joint_loss, joint_loss_fixed, LossWeights, RolloutBatch,
    RolloutStep,
};

/// Relative-error bound every check must meet.
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Dynamics,
    ActorCritic,
    Joint,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Dynamics, LossKind::ActorCritic, LossKind::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dynamics => "dynamics_loss",
            LossKind::ActorCritic => "actor_critic_loss",
            LossKind::Joint => "joint_loss",
        }
    }
}

fn random_config(rng: &mut ChaCha8Rng, world: &GridWorld) -> ModelConfig {
    let mut c = ModelConfig::for_env(world.config(), world.vocab());
    c.symbol_dim = rng.gen_range(2..5);
    c.token_dim = rng.gen_range(2..5);
    c.attn_dim = rng.gen_range(1..4);
    c.value_dim = rng.gen_range(1..4);
    c.hidden = rng.gen_range(3..8);
    c.rep_dim = rng.gen_range(2..6);
    c
}

fn random_model(rng: &mut ChaCha8Rng, cfg: ModelConfig) -> Result<Model, HarnessError> {
    let mut m = Model::init(cfg, rng.gen())?;
    for id in m.params.ids().collect::<Vec<_>>() {
        let scale = if m.params.name(id).ends_with("_emb") { 1.0 } else { 0.5 };
        for v in m.params.get_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    Ok(m)
}

/// `len` random steps, resetting after termination, as
/// `(observation, action, reward, done)`, closed by the observation that
/// follows the last step.
fn random_rollout(rng: &mut ChaCha8Rng, world: &GridWorld, len: usize) -> Result<Vec<(Observation, usize, f64, bool)>, HarnessError> {
    let (mut ep, mut obs) = world.reset(rng.gen())?;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let a = rng.gen_range(0..Action::ALL.len());
        let r = ep.step(Action::ALL[a])?;
        let done = r.done;
        out.push((std::mem::replace(&mut obs, r.observation), a, r.reward, done));
        if done {
            let (e, o) = world.reset(rng.gen())?;
            ep = e;
            obs = o;
        }
    }
    out.push((obs, 0, 0.0, false));
    Ok(out)
}

fn random_batch(rng: &mut ChaCha8Rng, world: &GridWorld) -> Result<Vec<RolloutBatch>, HarnessError> {
    let n = rng.gen_range(1..3);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(1..4);
        let mut roll = random_rollout(rng, world, len)?;
        roll.pop();
        let steps = roll
            .into_iter()
            .map(|(observation, action, _, _)| RolloutStep {
                observation,
                action,
                reward: rng.gen_range(-1.0..1.0),
                done: rng.gen_bool(0.3),
                log_prob: 0.0,
                value: 0.0,
            })
            .collect();
        out.push(RolloutBatch {
            steps,
            bootstrap_value: rng.gen_range(-1.0..1.0),
        });
    }
    Ok(out)
}

/// One random configuration of `kind`.
pub fn check_loss(kind: LossKind, seed: u64) -> Result<GradCheckReport, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = generate_split(rng.gen_range(3..6), 0.25, rng.gen())?;
    let mut env = EpisodeConfig::new(split, SplitSide::Train);
    env.language.message = rng.gen_bool(0.5);
    let world = GridWorld::new(env)?;
    let cfg = random_config(&mut rng, &world);
    let model = random_model(&mut rng, cfg)?;
    let check_seed = rng.gen();
    match kind {
        LossKind::Dynamics => {
            let len = rng.gen_range(1..4);
            let roll = random_rollout(&mut rng, &world, len)?;
            let pairs: Vec<(Observation, Observation)> = roll
                .windows(2)
                .filter(|w| !w[0].3)
                .map(|w| (w[0].0.clone(), w[1].0.clone()))
                .collect();
            let pairs = if pairs.is_empty() {
                let r = random_rollout(&mut rng, &world, 1)?;
                vec![(r[0].0.clone(), r[1].0.clone())]
            } else {
                pairs
            };
            grad_check(&model.params, EPS, check_seed, |g| {
                let refs: Vec<(&Observation, &Observation)> = pairs.iter().map(|(a, b)| (a, b)).collect();
                Ok::<_, HarnessError>(dynamics_loss(&cfg, g, &refs)?)
            })
        }
        LossKind::ActorCritic => {
            let batch = random_batch(&mut rng, &world)?;
            let weights = random_weights(&mut rng);
            let gamma = rng.gen_range(0.5..1.0);
            let adv = advantages(&model, &batch, gamma)?;
            let tape = tape_agreement(&model, |g| Ok(actor_critic_loss(&cfg, g, &batch, gamma, &weights)?.total), |g| {
                Ok(actor_critic_loss_fixed(&cfg, g, &batch, gamma, &weights, &adv)?.total)
            })?;
            let r = grad_check(&model.params, EPS, check_seed, |g| {
                Ok::<_, HarnessError>(actor_critic_loss_fixed(&cfg, g, &batch, gamma, &weights, &adv)?.total)
            })?;
            Ok(with_error(r, tape))
        }
        LossKind::Joint => {
            let batch = random_batch(&mut rng, &world)?;
            let weights = LossWeights {
                alpha_d: rng.gen_range(0.1..2.0),
                ..random_weights(&mut rng)
            };
            let gamma = rng.gen_range(0.5..1.0);
            let teacher = TeacherSnapshot::snapshot(&random_model(&mut rng, cfg)?, &[]);
            let metric = if rng.gen_bool(0.5) {
                DistillMetric::MeanSquared
            } else {
                DistillMetric::L2
            };
            let adv = advantages(&model, &batch, gamma)?;
            let t = Some(&teacher);
            let tape = tape_agreement(&model, |g| Ok(joint_loss(&cfg, g, &batch, gamma, t, &weights, metric)?.total), |g| {
                Ok(joint_loss_fixed(&cfg, g, &batch, gamma, t, &weights, metric, &adv)?.total)
            })?;
            let r = grad_check(&model.params, EPS, check_seed, |g| {
                Ok::<_, HarnessError>(joint_loss_fixed(&cfg, g, &batch, gamma, t, &weights, metric, &adv)?.total)
            })?;
            Ok(with_error(r, tape))
        }
    }
}

type LossFn<'a> = dyn Fn(&mut Graph<'_>) -> Result<Var, HarnessError> + 'a;

/// Largest relative difference between the tape gradients of two losses
/// at the model's parameters.
fn tape_agreement(model: &Model, a: impl Fn(&mut Graph<'_>) -> Result<Var, HarnessError>, b: impl Fn(&mut Graph<'_>) -> Result<Var, HarnessError>) -> Result<f64, HarnessError> {
    let grads = |f: &LossFn<'_>| -> Result<Vec<f64>, HarnessError> {
        let mut g = model.graph();
        let out = f(&mut g)?;
        let gr = g.backward(out)?;
        Ok(model
            .params
            .ids()
            .flat_map(|id| match gr.param(id) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; model.params.get(id).len()],
            })
            .collect())
    };
    let (ga, gb) = (grads(&a)?, grads(&b)?);
    Ok(ga.iter().zip(&gb).map(|(x, y)| relative_error(*x, *y)).fold(0.0, f64::max))
}

fn with_error(mut r: GradCheckReport, extra: f64) -> GradCheckReport {
    r.max_rel_error = r.max_rel_error.max(extra);
    r
}

fn random_weights(rng: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        alpha_v: rng.gen_range(0.1..1.0),
        alpha_d: 0.0,
        beta_h: rng.gen_range(0.0..0.2),
    }
}

fn worst(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
    reports.into_iter().fold(
        GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        },
        |a, r| GradCheckReport {
            max_rel_error: a.max_rel_error.max(r.max_rel_error),
            checked: a.checked + r.checked,
            skipped: a.skipped + r.skipped,
        },
    )
}

/// Worst report per objective over `configs` random configurations.
pub fn loss_suite(configs: usize, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>, HarnessError> {
    let mut out = Vec::with_capacity(LossKind::ALL.len());
    for (k, kind) in LossKind::ALL.into_iter().enumerate() {
        let reports = (0..configs)
            .map(|c| check_loss(kind, mix_seed(seed, (k * 100_003 + c) as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        out.push((kind.as_str(), worst(reports)));
    }
    Ok(out)
}

/// Every primitive, a random MLP and each objective, `configs` random
/// configurations apiece.
pub fn oracle_suite(configs: usize, seed: u64) -> Result<Vec<(String, GradCheckReport)>, HarnessError> {
    let mut out: Vec<(String, GradCheckReport)> = primitive_suite(configs, seed)?
        .into_iter()
        .map(|(n, r)| (n.to_string(), r))
        .collect();
    let mlp = (0..configs)
        .map(|c| check_mlp(mix_seed(seed ^ 0x6d6c70, c as u64)))
        .collect::<Result<Vec<_>, NumericsError>>()?;
    out.push(("mlp".into(), worst(mlp)));
    out.extend(loss_suite(configs, seed)?.into_iter().map(|(n, r)| (n.to_string(), r)));
    Ok(out)
}
