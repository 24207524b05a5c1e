use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    behavior_clone, joint_loss, pseudo_label, shaping_penalties, train_inverse_model, InverseConfig, InverseReport,
    LossWeights, RlError, RolloutBatch, RolloutStep,
};
use crate::demos::{collect_demos, episode_seed, sample_index, DemoPolicy, DemoStore};
use crate::env::{Action, Episode, EpisodeConfig, GridWorld, LanguageChannels, Observation, SplitSide, N_ACTIONS};
use crate::hash::mix_seed;
use crate::model::{encode, policy_logits, value, DistillMetric, Model, ModelConfig, TeacherSnapshot};
use crate::numerics::{clip_global_norm, Graph, Optimizer, OptimizerConfig};

pub const METRICS_HEADER: &str =
    "frames,episodes,variant,seed,train_win_rate,eval_win_rate,mean_return,J_pi,J_V,entropy,J_d,shaped_penalty_mean";

const SALT_INIT: u64 = 0x1417;
const SALT_EVAL_TRAIN: u64 = 0xe7a1;
const SALT_EVAL_HELD: u64 = 0xe7a2;
const SALT_INVERSE: u64 = 0x1a7e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Scratch,
    Vae,
    Ldd,
    LddMinusInit,
    LddMinusDistill,
    RewardShaping,
    Inverse,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Scratch,
        Variant::Vae,
        Variant::Ldd,
        Variant::LddMinusInit,
        Variant::LddMinusDistill,
        Variant::RewardShaping,
        Variant::Inverse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Scratch => "scratch",
            Variant::Vae => "vae",
            Variant::Ldd => "ldd",
            Variant::LddMinusInit => "ldd_minus_init",
            Variant::LddMinusDistill => "ldd_minus_distill",
            Variant::RewardShaping => "reward_shaping",
            Variant::Inverse => "inverse",
        }
    }

    /// Starts from the teacher's representation.
    pub fn teacher_init(self) -> bool {
        matches!(self, Variant::Ldd | Variant::LddMinusDistill)
    }

    /// Adds `alpha_d * J_d` to the loss.
    pub fn distills(self) -> bool {
        matches!(self, Variant::Ldd | Variant::LddMinusInit)
    }

    pub fn needs_teacher(self) -> bool {
        self.teacher_init() || self.distills() || self == Variant::RewardShaping
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub total_frames: u64,
    pub n_actors: usize,
    /// Unroll length `U`.
    pub unroll: usize,
    pub gamma: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub distill_metric: DistillMetric,
    /// Linear decay of `alpha_d` to zero over this many frames.
    pub alpha_d_anneal_frames: Option<u64>,
    pub max_grad_norm: Option<f64>,
    /// Frames between greedy evaluations.
    pub eval_every: u64,
    /// Greedy episodes per split and evaluation.
    pub eval_episodes: usize,
    pub checkpoint_every: Option<u64>,
    /// Shaping scale, `reward_shaping` only.
    pub shaping_lambda: Option<f64>,
    /// Pseudo-labeling pipeline, `inverse` only.
    pub inverse: Option<InverseConfig>,
    pub language: LanguageChannels,
}

impl TrainConfig {
    /// Defaults: 2M frames, 4 actors, U = 16, gamma 0.99, Adam at 1e-4,
    /// greedy evaluation every 50k frames.
    pub fn new(variant: Variant, seed: u64) -> Self {
        TrainConfig {
            variant,
            total_frames: 2_000_000,
            n_actors: 4,
            unroll: 16,
            gamma: 0.99,
            seed,
            optimizer: OptimizerConfig::adam(),
            weights: LossWeights::default(),
            distill_metric: DistillMetric::MeanSquared,
            alpha_d_anneal_frames: None,
            max_grad_norm: Some(40.0),
            eval_every: 50_000,
            eval_episodes: 100,
            checkpoint_every: None,
            shaping_lambda: (variant == Variant::RewardShaping).then_some(0.1),
            inverse: (variant == Variant::Inverse).then(InverseConfig::default),
            language: LanguageChannels::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        self.weights.validate()?;
        if self.n_actors == 0 || self.unroll == 0 {
            return Err(RlError::Config("n_actors and unroll must be positive".into()));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(RlError::Config("eval_every and eval_episodes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(RlError::Config(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if self.shaping_lambda.is_some() != (self.variant == Variant::RewardShaping) {
            return Err(RlError::Config("shaping_lambda is set iff the variant is reward_shaping".into()));
        }
        if let Some(l) = self.shaping_lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(RlError::Config(format!("shaping_lambda {l} must be >= 0")));
            }
        }
        if self.inverse.is_some() != (self.variant == Variant::Inverse) {
            return Err(RlError::Config("inverse settings are present iff the variant is inverse".into()));
        }
        if self.checkpoint_every == Some(0) || self.alpha_d_anneal_frames == Some(0) {
            return Err(RlError::Config("frame intervals must be positive".into()));
        }
        Ok(())
    }

    fn alpha_d_at(&self, frames: u64) -> f64 {
        if !self.variant.distills() {
            return 0.0;
        }
        match self.alpha_d_anneal_frames {
            Some(n) => self.weights.alpha_d * (1.0 - frames as f64 / n as f64).max(0.0),
            None => self.weights.alpha_d,
        }
    }
}

/// Artifacts a variant may need besides the environment.
#[derive(Default, Clone, Copy)]
pub struct Prerequisites<'a> {
    pub teacher: Option<&'a TeacherSnapshot>,
    /// Initial parameters for `vae`.
    pub init: Option<&'a Model>,
    /// Unlabeled demonstrations for `inverse`.
    pub demos: Option<&'a DemoStore>,
}

/// Loss values of one learner update, measured before the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub j_pi: f64,
    pub j_v: f64,
    pub entropy: f64,
    pub j_d: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub frames: u64,
    pub episodes: u64,
    pub variant: Variant,
    pub seed: u64,
    pub train_win_rate: f64,
    pub eval_win_rate: f64,
    /// Mean raw environment return of training episodes since the last row.
    pub mean_return: f64,
    pub j_pi: f64,
    pub j_v: f64,
    pub entropy: f64,
    pub j_d: f64,
    pub shaped_penalty_mean: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.frames,
            self.episodes,
            self.variant,
            self.seed,
            self.train_win_rate,
            self.eval_win_rate,
            self.mean_return,
            self.j_pi,
            self.j_v,
            self.entropy,
            self.j_d,
            self.shaped_penalty_mean
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub model: Model,
    pub frames: u64,
    pub episodes: u64,
    pub first_update: Option<UpdateStats>,
    /// Inverse-model evaluation when the variant is `inverse`.
    pub inverse_report: Option<InverseReport>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    /// First evaluated frame count with train win rate at least `threshold`.
    pub fn frames_to(&self, threshold: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.train_win_rate >= threshold).map(|r| r.frames)
    }

    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("training emits at least one row")
    }
}

/// Lowest-index argmax of a probability row.
pub fn greedy_action(probs: &[f64; N_ACTIONS]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn policy_and_value(cfg: &ModelConfig, model: &Model, batch: &[&Observation]) -> Result<(Vec<[f64; N_ACTIONS]>, Vec<f64>), RlError> {
    let mut g = model.graph();
    let rep = encode(cfg, &mut g, batch)?;
    let logits = policy_logits(&mut g, rep)?;
    let probs = g.softmax_last(logits)?;
    let v = value(&mut g, rep)?;
    let rows = g
        .value(probs)
        .data()
        .chunks(N_ACTIONS)
        .map(|r| {
            let mut p = [0.0; N_ACTIONS];
            p.copy_from_slice(r);
            p
        })
        .collect();
    Ok((rows, g.value(v).data().to_vec()))
}

/// Greedy rollouts of `model` on the episodes seeded by `seeds`, stepped
/// together. Returns `(win rate, mean return)`.
pub fn evaluate_greedy(model: &Model, world: &GridWorld, seeds: &[u64]) -> Result<(f64, f64), RlError> {
    if seeds.is_empty() {
        return Err(RlError::Empty);
    }
    let mut live: Vec<(Episode, Observation, f64)> = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let (ep, obs) = world.reset(s)?;
        live.push((ep, obs, 0.0));
    }
    let (mut wins, mut total_return) = (0usize, 0.0);
    while !live.is_empty() {
        let batch: Vec<&Observation> = live.iter().map(|l| &l.1).collect();
        let (probs, _) = policy_and_value(&model.config, model, &batch)?;
        let mut next = Vec::with_capacity(live.len());
        for ((mut ep, _, ret), p) in live.into_iter().zip(probs) {
            let r = ep.step(Action::ALL[greedy_action(&p)])?;
            let ret = ret + r.reward;
            if r.done {
                wins += r.win as usize;
                total_return += ret;
            } else {
                next.push((ep, r.observation, ret));
            }
        }
        live = next;
    }
    Ok((wins as f64 / seeds.len() as f64, total_return / seeds.len() as f64))
}

/// Episode seeds of the greedy evaluation set for `side`.
pub fn eval_seeds(seed: u64, side: SplitSide, n: usize) -> Vec<u64> {
    let salt = match side {
        SplitSide::Train => SALT_EVAL_TRAIN,
        SplitSide::Eval => SALT_EVAL_HELD,
    };
    (0..n).map(|i| episode_seed(mix_seed(seed, salt), i)).collect()
}

struct Actor {
    episode: Episode,
    obs: Observation,
    env_rng: ChaCha8Rng,
    act_rng: ChaCha8Rng,
    ret: f64,
}

impl Actor {
    fn new(world: &GridWorld, seed: u64, i: usize) -> Result<Self, RlError> {
        let mut env_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1000 + i as u64));
        let act_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2000 + i as u64));
        let (episode, obs) = world.reset(env_rng.gen::<u32>() as u64)?;
        Ok(Actor {
            episode,
            obs,
            env_rng,
            act_rng,
            ret: 0.0,
        })
    }
}

#[derive(Default)]
struct Window {
    updates: usize,
    j_pi: f64,
    j_v: f64,
    entropy: f64,
    j_d: f64,
    j_d_updates: usize,
    penalty: f64,
    steps: usize,
    returns: f64,
    episodes: usize,
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn check_compat(cfg: &ModelConfig, world: &GridWorld) -> Result<(), RlError> {
    let env = world.config();
    let v = world.vocab();
    if cfg.height != env.height || cfg.width != env.width || cfg.n_symbols != v.n_symbols() || cfg.n_tokens != v.n_tokens() {
        return Err(RlError::Model(crate::model::ModelError::Mismatch(format!(
            "model expects {}x{} with {} symbols and {} tokens; environment has {}x{}, {} symbols, {} tokens",
            cfg.height,
            cfg.width,
            cfg.n_symbols,
            cfg.n_tokens,
            env.height,
            env.width,
            v.n_symbols(),
            v.n_tokens()
        ))));
    }
    Ok(())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RlError {
    RlError::Io(format!("{}: {e}", path.display()))
}

/// Runs the actor-learner loop for `config.variant`. `env` fixes the
/// board and split; its language channels are replaced by
/// `config.language` and its side by train (acting, train-split
/// evaluation) and eval (held-out evaluation). With `out_dir`, writes
/// `metrics.csv`, periodic checkpoints and `final.ckpt`.
pub fn train(
    config: &TrainConfig,
    env: &EpisodeConfig,
    pre: &Prerequisites<'_>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, RlError> {
    config.validate()?;
    let v = config.variant;
    if v.needs_teacher() && pre.teacher.is_none() {
        return Err(RlError::Missing("teacher snapshot"));
    }
    if v == Variant::Vae && pre.init.is_none() {
        return Err(RlError::Missing("VAE-pretrained parameters"));
    }
    if v == Variant::Inverse && pre.demos.is_none() {
        return Err(RlError::Missing("unlabeled demonstrations"));
    }
    if let Some(t) = pre.teacher {
        if !t.verify() {
            return Err(RlError::Config("teacher parameters do not match their hash".into()));
        }
    }

    let mut env = env.clone();
    env.language = config.language;
    let world = GridWorld::new(env.with_side(SplitSide::Train))?;
    let held_world = GridWorld::new(env.with_side(SplitSide::Eval))?;
    let model_cfg = match (pre.teacher, pre.init) {
        (Some(t), _) => *t.config(),
        (None, Some(m)) if v == Variant::Vae => m.config,
        _ => ModelConfig::for_env(world.config(), world.vocab()),
    };
    check_compat(&model_cfg, &world)?;
    let teacher = pre.teacher;

    let mut inverse_report = None;
    let mut model = match v {
        Variant::Ldd | Variant::LddMinusDistill => teacher.expect("checked").to_model()?,
        Variant::Vae => {
            let m = pre.init.expect("checked");
            check_compat(&m.config, &world)?;
            m.clone()
        }
        Variant::Inverse => {
            let demos = pre.demos.expect("checked");
            let (m, report) = inverse_init(config, &env, demos, model_cfg)?;
            inverse_report = Some(report);
            m
        }
        Variant::Scratch | Variant::LddMinusInit | Variant::RewardShaping => {
            Model::init(model_cfg, mix_seed(config.seed, SALT_INIT))?
        }
    };
    let distill_teacher = if v.distills() || v.teacher_init() { teacher } else { None };
    let shape_teacher = if v == Variant::RewardShaping { teacher } else { None };
    let lambda = config.shaping_lambda.unwrap_or(0.0);

    let train_seeds = eval_seeds(config.seed, SplitSide::Train, config.eval_episodes);
    let held_seeds = eval_seeds(config.seed, SplitSide::Eval, config.eval_episodes);
    let mut actors: Vec<Actor> = (0..config.n_actors)
        .map(|i| Actor::new(&world, config.seed, i))
        .collect::<Result<_, _>>()?;
    let mut opt = Optimizer::new(config.optimizer);

    let mut rows = Vec::new();
    let mut window = Window::default();
    let (mut frames, mut episodes) = (0u64, 0u64);
    let mut first_update = None;
    let mut next_eval = 0u64;
    let mut next_ckpt = config.checkpoint_every;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }

    let emit = |model: &Model, frames: u64, episodes: u64, w: &Window| -> Result<MetricsRow, RlError> {
        let (train_win, _) = evaluate_greedy(model, &world, &train_seeds)?;
        let (held_win, _) = evaluate_greedy(model, &held_world, &held_seeds)?;
        Ok(MetricsRow {
            frames,
            episodes,
            variant: v,
            seed: config.seed,
            train_win_rate: train_win,
            eval_win_rate: held_win,
            mean_return: mean(w.returns, w.episodes),
            j_pi: mean(w.j_pi, w.updates),
            j_v: mean(w.j_v, w.updates),
            entropy: mean(w.entropy, w.updates),
            j_d: mean(w.j_d, w.j_d_updates),
            shaped_penalty_mean: if v == Variant::RewardShaping {
                mean(w.penalty, w.steps) + 0.0
            } else {
                0.0
            },
        })
    };

    loop {
        if frames >= next_eval {
            rows.push(emit(&model, frames, episodes, &window)?);
            log::info!(
                "{v} seed {} frames {frames}: train win {:.2} eval win {:.2}",
                config.seed,
                rows.last().unwrap().train_win_rate,
                rows.last().unwrap().eval_win_rate
            );
            window = Window::default();
            next_eval += config.eval_every;
        }
        if frames >= config.total_frames {
            break;
        }

        let mut unrolls: Vec<Vec<RolloutStep>> = (0..actors.len()).map(|_| Vec::with_capacity(config.unroll)).collect();
        for _ in 0..config.unroll {
            let batch: Vec<&Observation> = actors.iter().map(|a| &a.obs).collect();
            let (probs, values) = policy_and_value(&model.config, &model, &batch)?;
            let mut stepped = Vec::with_capacity(actors.len());
            for (a, p) in actors.iter_mut().zip(&probs) {
                let k = sample_index(p, &mut a.act_rng);
                let r = a.episode.step(Action::ALL[k])?;
                stepped.push((k, r));
            }
            let penalties = match shape_teacher {
                Some(t) => {
                    let pairs: Vec<(&Observation, &Observation)> =
                        actors.iter().zip(&stepped).map(|(a, (_, r))| (&a.obs, &r.observation)).collect();
                    shaping_penalties(t, &pairs, lambda)?
                }
                None => vec![0.0; actors.len()],
            };
            for (i, (a, (k, r))) in actors.iter_mut().zip(stepped).enumerate() {
                a.ret += r.reward;
                window.penalty += penalties[i];
                window.steps += 1;
                let prev = std::mem::replace(&mut a.obs, r.observation);
                unrolls[i].push(RolloutStep {
                    observation: prev,
                    action: k,
                    reward: r.reward + penalties[i],
                    done: r.done,
                    log_prob: probs[i][k].ln(),
                    value: values[i],
                });
                if r.done {
                    window.returns += a.ret;
                    window.episodes += 1;
                    episodes += 1;
                    a.ret = 0.0;
                    let (ep, obs) = world.reset(a.env_rng.gen::<u32>() as u64)?;
                    a.episode = ep;
                    a.obs = obs;
                }
            }
            frames += actors.len() as u64;
        }
        let last: Vec<&Observation> = actors.iter().map(|a| &a.obs).collect();
        let (_, boot) = policy_and_value(&model.config, &model, &last)?;
        let batch: Vec<RolloutBatch> = unrolls
            .into_iter()
            .zip(boot)
            .map(|(steps, bootstrap_value)| RolloutBatch { steps, bootstrap_value })
            .collect();

        let weights = LossWeights {
            alpha_d: config.alpha_d_at(frames),
            ..config.weights
        };
        let (stats, mut grads) = {
            let mut g = Graph::with_params(&model.params);
            let terms = joint_loss(&model.config, &mut g, &batch, config.gamma, distill_teacher, &weights, config.distill_metric)?;
            let grads = g.backward(terms.total)?;
            let stats = UpdateStats {
                j_pi: g.scalar_value(terms.ac.j_pi),
                j_v: g.scalar_value(terms.ac.j_v),
                entropy: g.scalar_value(terms.ac.entropy),
                j_d: terms.j_d.map(|d| g.scalar_value(d)),
                total: g.scalar_value(terms.total),
                grad_norm: grads.global_norm(),
            };
            (stats, grads)
        };
        if let Some(m) = config.max_grad_norm {
            clip_global_norm(&mut grads, m);
        }
        opt.step(&mut model.params, &grads)?;
        first_update.get_or_insert(stats);
        window.updates += 1;
        window.j_pi += stats.j_pi;
        window.j_v += stats.j_v;
        window.entropy += stats.entropy;
        if let Some(d) = stats.j_d {
            window.j_d += d;
            window.j_d_updates += 1;
        }

        if let (Some(dir), Some(at)) = (out_dir, next_ckpt) {
            if frames >= at {
                save_checkpoint(&model, config, frames, &dir.join(format!("ckpt_{frames:09}.ckpt")))?;
                next_ckpt = Some(at + config.checkpoint_every.expect("set"));
            }
        }
    }
    if rows.last().is_some_and(|r| r.frames != frames) {
        rows.push(emit(&model, frames, episodes, &window)?);
    }

    let outcome = TrainOutcome {
        rows,
        model,
        frames,
        episodes,
        first_update,
        inverse_report,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("metrics.csv");
        std::fs::write(&path, outcome.metrics_csv()).map_err(|e| io_err(&path, e))?;
        save_checkpoint(&outcome.model, config, frames, &dir.join("final.ckpt"))?;
    }
    Ok(outcome)
}

fn save_checkpoint(model: &Model, config: &TrainConfig, frames: u64, path: &Path) -> Result<(), RlError> {
    let meta = vec![
        ("train.variant".to_string(), config.variant.to_string()),
        ("train.seed".to_string(), config.seed.to_string()),
        ("train.frames".to_string(), frames.to_string()),
    ];
    model.save(path, &meta)?;
    Ok(())
}

/// Scratch learner, labeled rollouts of it, inverse model, pseudo-labels
/// for `demos` and behavior cloning on them.
fn inverse_init(
    config: &TrainConfig,
    env: &EpisodeConfig,
    demos: &DemoStore,
    model_cfg: ModelConfig,
) -> Result<(Model, InverseReport), RlError> {
    let inv: &InverseConfig = config.inverse.as_ref().expect("validated");
    let world = GridWorld::new(env.with_side(SplitSide::Train))?;
    demos.check_env(&world)?;

    let mut base = TrainConfig::new(Variant::Scratch, mix_seed(config.seed, SALT_INVERSE));
    base.total_frames = inv.pretrain_frames;
    base.eval_every = inv.pretrain_frames.max(1);
    base.eval_episodes = config.eval_episodes;
    base.n_actors = config.n_actors;
    base.unroll = config.unroll;
    base.gamma = config.gamma;
    base.optimizer = config.optimizer;
    base.weights = config.weights;
    base.max_grad_norm = config.max_grad_norm;
    base.language = config.language;
    let scratch = train(&base, env, &Prerequisites::default(), None)?;

    let policy = DemoPolicy::Checkpoint {
        model: &scratch.model,
        frames: scratch.frames,
    };
    let rollouts = collect_demos(&world, policy, inv.rollout_episodes, mix_seed(config.seed, SALT_INVERSE + 1), false)?;
    let (inverse, report) = train_inverse_model(&rollouts, model_cfg, inv, Some(&world))?;
    let labeled = pseudo_label(demos, &inverse)?;
    let bc = behavior_clone(&labeled, model_cfg, &inv.bc)?;
    log::info!(
        "inverse model: held-out acc {:.3}, unambiguous {:.3}",
        report.heldout_acc,
        report.unambiguous_acc.unwrap_or(f64::NAN)
    );
    Ok((bc, report))
}
