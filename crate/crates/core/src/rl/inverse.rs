use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RlError;
use crate::demos::{split_holdout, DemoStore};
use crate::env::{Action, GridWorld, Observation, N_ACTIONS};
use crate::hash::mix_seed;
use crate::model::{encode, policy_logits, Model, ModelConfig};
use crate::numerics::{clip_global_norm, Graph, Optimizer, OptimizerConfig, ParamGroup, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BcConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Held-out trajectories for early stopping; `None` keeps the last
    /// epoch.
    pub eval_fraction: Option<f64>,
    pub patience: usize,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            epochs: 20,
            batch_size: 64,
            optimizer: OptimizerConfig::adam().with_lr(1e-3),
            eval_fraction: Some(0.1),
            patience: 3,
            seed: 0,
            max_grad_norm: Some(40.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseConfig {
    /// Scratch-learner frames before the labeled rollouts.
    pub pretrain_frames: u64,
    pub rollout_episodes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub eval_fraction: f64,
    pub patience: usize,
    pub hidden: usize,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
    pub bc: BcConfig,
}

impl Default for InverseConfig {
    fn default() -> Self {
        InverseConfig {
            pretrain_frames: 100_000,
            rollout_episodes: 500,
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerConfig::adam().with_lr(1e-3),
            eval_fraction: 0.1,
            patience: 5,
            hidden: 128,
            seed: 0,
            max_grad_norm: Some(40.0),
            bc: BcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseReport {
    pub heldout_acc: f64,
    pub heldout_transitions: usize,
    /// Accuracy on held-out transitions explained by exactly one action.
    pub unambiguous_acc: Option<f64>,
    pub unambiguous_transitions: usize,
    pub epochs_run: usize,
}

/// Action classifier over `encode(s_t) ++ encode(s_{t+1})` with its own
/// encoder and one hidden layer.
#[derive(Debug, Clone)]
pub struct InverseModel {
    pub config: ModelConfig,
    pub hidden: usize,
    pub params: ParamStore,
    /// Vocabulary the model was trained on.
    pub vocab_hash: u64,
}

impl InverseModel {
    pub fn init(config: ModelConfig, hidden: usize, vocab_hash: u64, seed: u64) -> Result<Self, RlError> {
        let base = Model::init(config, seed)?;
        let mut params = base.params.subset(|g| g == ParamGroup::Rep);
        let fan_in = 2 * config.rep_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 7));
        let w: Vec<f64> = (0..fan_in * hidden).map(|_| rng.gen_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..hidden).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert("aux.inv.h.w", Tensor::new(vec![fan_in, hidden], w)?);
        params.insert("aux.inv.h.b", Tensor::new(vec![hidden], b)?);
        params.insert("aux.inv.out.w", Tensor::zeros(&[hidden, N_ACTIONS]));
        params.insert("aux.inv.out.b", Tensor::zeros(&[N_ACTIONS]));
        Ok(InverseModel {
            config,
            hidden,
            params,
            vocab_hash,
        })
    }

    /// `[B, 5]` action logits.
    pub fn logits(&self, g: &mut Graph<'_>, pairs: &[(&Observation, &Observation)]) -> Result<Var, RlError> {
        if pairs.is_empty() {
            return Err(RlError::Empty);
        }
        let cur: Vec<&Observation> = pairs.iter().map(|p| p.0).collect();
        let next: Vec<&Observation> = pairs.iter().map(|p| p.1).collect();
        let a = encode(&self.config, g, &cur)?;
        let b = encode(&self.config, g, &next)?;
        let x = g.concat_last(&[a, b])?;
        let hw = g.param("aux.inv.h.w")?;
        let hb = g.param("aux.inv.h.b")?;
        let h = g.matmul(x, hw)?;
        let h = g.add_bias(h, hb)?;
        let h = g.relu(h)?;
        let ow = g.param("aux.inv.out.w")?;
        let ob = g.param("aux.inv.out.b")?;
        let o = g.matmul(h, ow)?;
        Ok(g.add_bias(o, ob)?)
    }

    /// Lowest-index argmax action per pair.
    pub fn predict(&self, pairs: &[(&Observation, &Observation)]) -> Result<Vec<usize>, RlError> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(256) {
            let mut g = Graph::with_params(&self.params);
            let l = self.logits(&mut g, chunk)?;
            out.extend(g.value(l).argmax_rows());
        }
        Ok(out)
    }
}

fn labeled_pairs(store: &DemoStore) -> Result<Vec<(&Observation, &Observation, usize)>, RlError> {
    if !store.header.labeled {
        return Err(RlError::Unlabeled);
    }
    let mut out = Vec::new();
    for tr in &store.trajectories {
        let actions = tr.actions.as_ref().ok_or(RlError::Unlabeled)?;
        for (t, a) in actions.iter().enumerate() {
            out.push((&tr.observations[t], &tr.observations[t + 1], a.index()));
        }
    }
    Ok(out)
}

/// For each labeled transition, whether exactly one action reproduces
/// `s_{t+1}` from the replayed state at `s_t`.
pub fn transition_ambiguity(world: &GridWorld, store: &DemoStore) -> Result<Vec<Vec<bool>>, RlError> {
    store.verify_replay(world)?;
    let mut out = Vec::with_capacity(store.len());
    for tr in &store.trajectories {
        let (mut ep, _) = world.reset(tr.seed)?;
        let actions = tr.actions.as_ref().ok_or(RlError::Unlabeled)?;
        let mut flags = Vec::with_capacity(actions.len());
        for (t, &a) in actions.iter().enumerate() {
            let mut matches = 0;
            for cand in Action::ALL {
                let mut probe = ep.clone();
                if probe.step(cand)?.observation == tr.observations[t + 1] {
                    matches += 1;
                }
            }
            flags.push(matches == 1);
            ep.step(a)?;
        }
        out.push(flags);
    }
    Ok(out)
}

fn inverse_accuracy(model: &InverseModel, pairs: &[(&Observation, &Observation, usize)]) -> Result<f64, RlError> {
    if pairs.is_empty() {
        return Err(RlError::Empty);
    }
    let input: Vec<(&Observation, &Observation)> = pairs.iter().map(|p| (p.0, p.1)).collect();
    let pred = model.predict(&input)?;
    let hits = pred.iter().zip(pairs).filter(|(p, t)| **p == t.2).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Supervised action classification on a labeled store; the parameters
/// kept are those at the best held-out accuracy. With `world`, the report
/// also scores held-out transitions that only one action explains.
pub fn train_inverse_model(
    store: &DemoStore,
    model_cfg: ModelConfig,
    config: &InverseConfig,
    world: Option<&GridWorld>,
) -> Result<(InverseModel, InverseReport), RlError> {
    if store.is_empty() || store.n_transitions() == 0 {
        return Err(RlError::Empty);
    }
    if !store.header.labeled {
        return Err(RlError::Unlabeled);
    }
    let (train, held) = split_holdout(store, config.eval_fraction, mix_seed(config.seed, 1))?;
    let train_pairs = labeled_pairs(&train)?;
    let held_pairs = labeled_pairs(&held)?;
    if train_pairs.is_empty() || held_pairs.is_empty() {
        return Err(RlError::Empty);
    }
    let mut model = InverseModel::init(model_cfg, config.hidden, store.header.vocab_hash, mix_seed(config.seed, 2))?;
    let mut opt = Optimizer::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3));
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut best = (inverse_accuracy(&model, &held_pairs)?, model.params.clone());
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let pairs: Vec<(&Observation, &Observation)> = chunk.iter().map(|&i| (train_pairs[i].0, train_pairs[i].1)).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train_pairs[i].2).collect();
            let mut grads = {
                let mut g = Graph::with_params(&model.params);
                let l = model.logits(&mut g, &pairs)?;
                let loss = g.cross_entropy(l, &targets)?;
                g.backward(loss)?
            };
            if let Some(m) = config.max_grad_norm {
                clip_global_norm(&mut grads, m);
            }
            opt.step(&mut model.params, &grads)?;
        }
        epochs_run = epoch;
        let acc = inverse_accuracy(&model, &held_pairs)?;
        log::debug!("inverse epoch {epoch}: held-out acc {acc:.4}");
        if acc > best.0 {
            best = (acc, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.params = best.1;

    let (unambiguous_acc, unambiguous_transitions) = match world {
        Some(w) => {
            let flags = transition_ambiguity(w, &held)?;
            let clear: Vec<(&Observation, &Observation, usize)> = held_pairs
                .iter()
                .zip(flags.iter().flatten())
                .filter(|(_, &f)| f)
                .map(|(p, _)| *p)
                .collect();
            if clear.is_empty() {
                (None, 0)
            } else {
                (Some(inverse_accuracy(&model, &clear)?), clear.len())
            }
        }
        None => (None, 0),
    };
    let report = InverseReport {
        heldout_acc: best.0,
        heldout_transitions: held_pairs.len(),
        unambiguous_acc,
        unambiguous_transitions,
        epochs_run,
    };
    Ok((model, report))
}

/// Inserts the inverse model's argmax action for every transition of
/// `demos` and marks the store pseudo-labeled.
pub fn pseudo_label(demos: &DemoStore, inv: &InverseModel) -> Result<DemoStore, RlError> {
    if demos.header.vocab_hash != inv.vocab_hash {
        return Err(RlError::VocabHash {
            store: demos.header.vocab_hash,
            model: inv.vocab_hash,
        });
    }
    let mut labels = Vec::with_capacity(demos.len());
    for tr in &demos.trajectories {
        let pairs: Vec<(&Observation, &Observation)> = tr.observations.windows(2).map(|w| (&w[0], &w[1])).collect();
        let pred = if pairs.is_empty() { Vec::new() } else { inv.predict(&pairs)? };
        labels.push(
            pred.into_iter()
                .map(|k| Action::from_index(k).expect("classifier has five outputs"))
                .collect(),
        );
    }
    Ok(demos.with_pseudo_labels(labels)?)
}

fn bc_loss(model: &Model, pairs: &[(&Observation, usize)]) -> Result<f64, RlError> {
    let mut total = 0.0;
    for chunk in pairs.chunks(256) {
        let obs: Vec<&Observation> = chunk.iter().map(|p| p.0).collect();
        let targets: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        let mut g = model.graph();
        let rep = encode(&model.config, &mut g, &obs)?;
        let l = policy_logits(&mut g, rep)?;
        let loss = g.cross_entropy(l, &targets)?;
        total += g.scalar_value(loss) * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn state_action_pairs(store: &DemoStore) -> Result<Vec<(&Observation, usize)>, RlError> {
    Ok(labeled_pairs(store)?.into_iter().map(|(s, _, a)| (s, a)).collect())
}

/// Cross-entropy on the stored actions through `encode` and the policy
/// head. Zero epochs return the zero-head initialization.
pub fn behavior_clone(store: &DemoStore, model_cfg: ModelConfig, config: &BcConfig) -> Result<Model, RlError> {
    if !store.header.labeled {
        return Err(RlError::Unlabeled);
    }
    let mut model = Model::init(model_cfg, mix_seed(config.seed, 2))?;
    if config.epochs == 0 {
        return Ok(model);
    }
    let (train, held) = match config.eval_fraction {
        Some(f) => {
            let (a, b) = split_holdout(store, f, mix_seed(config.seed, 1))?;
            (a, Some(b))
        }
        None => (store.clone(), None),
    };
    let pairs = state_action_pairs(&train)?;
    if pairs.is_empty() {
        return Err(RlError::Empty);
    }
    let held_pairs = match &held {
        Some(h) => Some(state_action_pairs(h)?).filter(|p| !p.is_empty()),
        None => None,
    };
    let mut opt = Optimizer::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    let keep = |g: ParamGroup| matches!(g, ParamGroup::Rep | ParamGroup::Policy);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let obs: Vec<&Observation> = chunk.iter().map(|&i| pairs[i].0).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| pairs[i].1).collect();
            let mut grads = {
                let mut g = model.graph();
                let rep = encode(&model.config, &mut g, &obs)?;
                let l = policy_logits(&mut g, rep)?;
                let loss = g.cross_entropy(l, &targets)?;
                g.backward(loss)?
            };
            if let Some(m) = config.max_grad_norm {
                clip_global_norm(&mut grads, m);
            }
            opt.step_groups(&mut model.params, &grads, keep)?;
        }
        if let Some(hp) = &held_pairs {
            let loss = bc_loss(&model, hp)?;
            log::debug!("bc epoch {epoch}: held-out loss {loss:.4}");
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(model)
}
