//! `key=value` experiment configuration with dotted sections.

use std::collections::BTreeMap;
use std::path::Path;

use super::HarnessError;
use crate::env::{generate_split, EpisodeConfig, LanguageChannels, SplitSide};
use crate::model::DistillMetric;
use crate::numerics::{OptimizerConfig, OptimizerKind};
use crate::pretrain::{PretrainConfig, VaeConfig};
use crate::rl::{BcConfig, InverseConfig, LossWeights, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown keys: {}", list_keys(.0))]
    Unknown(Vec<(usize, String)>),
    #[error("line {line}: {key}: cannot parse {value:?} as {expected}")]
    Type {
        line: usize,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("line {line}: {key} is set twice (first on line {first})")]
    Duplicate { line: usize, first: usize, key: String },
    #[error("missing required key {key}")]
    Missing { key: String },
    #[error("line {line}: {key}: {msg}")]
    Invalid { line: usize, key: String, msg: String },
}

fn list_keys(keys: &[(usize, String)]) -> String {
    keys.iter().map(|(l, k)| format!("{k} (line {l})")).collect::<Vec<_>>().join(", ")
}

/// Demonstrator whose unlabeled trajectories feed pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DemoSource {
    Expert,
    Random,
}

impl DemoSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DemoSource::Expert => "expert",
            DemoSource::Random => "random",
        }
    }
}

impl std::str::FromStr for DemoSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "expert" => Ok(DemoSource::Expert),
            "random" => Ok(DemoSource::Random),
            _ => Err(format!("unknown demo source {s:?}")),
        }
    }
}

/// Which language channels are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Language {
    Full,
    NoMessage,
    NoManual,
    None,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::Full => "full",
            Language::NoMessage => "no_message",
            Language::NoManual => "no_manual",
            Language::None => "none",
        }
    }

    pub fn channels(self) -> LanguageChannels {
        LanguageChannels {
            manual: matches!(self, Language::Full | Language::NoMessage),
            message: matches!(self, Language::Full | Language::NoManual),
        }
    }
}

impl std::str::FromStr for Language {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Language::Full),
            "no_message" => Ok(Language::NoMessage),
            "no_manual" => Ok(Language::NoManual),
            "none" => Ok(Language::None),
            _ => Err(format!("unknown language setting {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSettings {
    pub n_classes: usize,
    pub holdout_fraction: f64,
    pub split_seed: u64,
    pub height: usize,
    pub width: usize,
    pub max_steps: u32,
    pub step_penalty: f64,
    pub gamma: f64,
    pub language: Language,
}

impl Default for EnvSettings {
    fn default() -> Self {
        EnvSettings {
            n_classes: 6,
            holdout_fraction: 0.2,
            split_seed: 0,
            height: 8,
            width: 8,
            max_steps: 64,
            step_penalty: 0.01,
            gamma: 0.99,
            language: Language::Full,
        }
    }
}

impl EnvSettings {
    /// Train-side episode config with `language` applied.
    pub fn episode_config(&self, language: Language) -> Result<EpisodeConfig, HarnessError> {
        let split = generate_split(self.n_classes, self.holdout_fraction, self.split_seed)?;
        let mut c = EpisodeConfig::new(split, SplitSide::Train);
        c.height = self.height;
        c.width = self.width;
        c.max_steps = self.max_steps;
        c.step_penalty = self.step_penalty;
        c.gamma = self.gamma;
        c.language = language.channels();
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSettings {
    pub source: DemoSource,
    pub count: usize,
    pub seed: u64,
}

impl Default for DemoSettings {
    fn default() -> Self {
        DemoSettings {
            source: DemoSource::Expert,
            count: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlSettings {
    pub variant: Variant,
    pub seed: u64,
    pub total_frames: u64,
    pub n_actors: usize,
    pub unroll: usize,
    pub gamma: f64,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub distill_metric: DistillMetric,
    pub alpha_d_anneal_frames: Option<u64>,
    pub max_grad_norm: Option<f64>,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub checkpoint_every: Option<u64>,
    pub shaping_lambda: f64,
}

impl Default for RlSettings {
    fn default() -> Self {
        let t = TrainConfig::new(Variant::Ldd, 0);
        RlSettings {
            variant: Variant::Ldd,
            seed: 0,
            total_frames: t.total_frames,
            n_actors: t.n_actors,
            unroll: t.unroll,
            gamma: t.gamma,
            optimizer: t.optimizer,
            weights: t.weights,
            distill_metric: t.distill_metric,
            alpha_d_anneal_frames: t.alpha_d_anneal_frames,
            max_grad_norm: t.max_grad_norm,
            eval_every: t.eval_every,
            eval_episodes: t.eval_episodes,
            checkpoint_every: t.checkpoint_every,
            shaping_lambda: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSettings {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub demo_sources: Vec<DemoSource>,
    pub languages: Vec<Language>,
    /// Concurrent cells; 1 runs them in order.
    pub workers: usize,
}

impl Default for MatrixSettings {
    fn default() -> Self {
        MatrixSettings {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            demo_sources: vec![DemoSource::Expert],
            languages: vec![Language::Full],
            workers: 1,
        }
    }
}

/// Input and output paths; unset entries are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathSettings {
    pub out_dir: Option<String>,
    pub demos: Option<String>,
    pub teacher: Option<String>,
    pub init: Option<String>,
    pub checkpoint: Option<String>,
}

/// The whole configuration tree.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub env: EnvSettings,
    pub demos: DemoSettings,
    pub pretrain: PretrainConfig,
    pub vae: VaeConfig,
    pub rl: RlSettings,
    pub inverse: InverseConfig,
    pub matrix: MatrixSettings,
    pub paths: PathSettings,
}

enum Field<'a> {
    F64(&'a mut f64),
    U64(&'a mut u64),
    U32(&'a mut u32),
    Usize(&'a mut usize),
    OptF64(&'a mut Option<f64>),
    OptU64(&'a mut Option<u64>),
    OptUsize(&'a mut Option<usize>),
    OptStr(&'a mut Option<String>),
    Variant(&'a mut Variant),
    Variants(&'a mut Vec<Variant>),
    Seeds(&'a mut Vec<u64>),
    Source(&'a mut DemoSource),
    Sources(&'a mut Vec<DemoSource>),
    Language(&'a mut Language),
    Languages(&'a mut Vec<Language>),
    Optimizer(&'a mut OptimizerKind),
    Metric(&'a mut DistillMetric),
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = s.split(',').map(|x| x.trim().parse().ok()).collect();
    items.filter(|v| !v.is_empty())
}

fn parse_opt<T: std::str::FromStr>(s: &str) -> Option<Option<T>> {
    if s == "none" {
        Some(None)
    } else {
        s.parse().ok().map(Some)
    }
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

fn join<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    v.iter().map(f).collect::<Vec<_>>().join(",")
}

fn metric_str(m: DistillMetric) -> &'static str {
    match m {
        DistillMetric::MeanSquared => "mean_squared",
        DistillMetric::L2 => "l2",
    }
}

impl Field<'_> {
    fn expected(&self) -> &'static str {
        match self {
            Field::F64(_) => "a number",
            Field::U64(_) | Field::U32(_) | Field::Usize(_) => "a non-negative integer",
            Field::OptF64(_) => "a number or none",
            Field::OptU64(_) | Field::OptUsize(_) => "a non-negative integer or none",
            Field::OptStr(_) => "a string or none",
            Field::Variant(_) => "a variant name",
            Field::Variants(_) => "a comma-separated list of variant names",
            Field::Seeds(_) => "a comma-separated list of integers",
            Field::Source(_) => "expert or random",
            Field::Sources(_) => "a comma-separated list of expert/random",
            Field::Language(_) => "full, no_message, no_manual or none",
            Field::Languages(_) => "a comma-separated list of language settings",
            Field::Optimizer(_) => "adam or rmsprop",
            Field::Metric(_) => "mean_squared or l2",
        }
    }

    /// Stores `s`; `false` when it does not parse.
    fn set(&mut self, s: &str) -> bool {
        fn put<T>(slot: &mut T, v: Option<T>) -> bool {
            v.map(|v| *slot = v).is_some()
        }
        match self {
            Field::F64(x) => put(*x, s.parse().ok().filter(|v: &f64| v.is_finite())),
            Field::U64(x) => put(*x, s.parse().ok()),
            Field::U32(x) => put(*x, s.parse().ok()),
            Field::Usize(x) => put(*x, s.parse().ok()),
            Field::OptF64(x) => put(*x, parse_opt(s).filter(|v: &Option<f64>| v.is_none_or(f64::is_finite))),
            Field::OptU64(x) => put(*x, parse_opt(s)),
            Field::OptUsize(x) => put(*x, parse_opt(s)),
            Field::OptStr(x) => put(*x, Some((s != "none" && !s.is_empty()).then(|| s.to_string()))),
            Field::Variant(x) => put(*x, s.parse().ok()),
            Field::Variants(x) => put(*x, parse_list(s)),
            Field::Seeds(x) => put(*x, parse_list(s)),
            Field::Source(x) => put(*x, s.parse().ok()),
            Field::Sources(x) => put(*x, parse_list(s)),
            Field::Language(x) => put(*x, s.parse().ok()),
            Field::Languages(x) => put(*x, parse_list(s)),
            Field::Optimizer(x) => put(*x, s.parse().ok()),
            Field::Metric(x) => put(
                *x,
                match s {
                    "mean_squared" => Some(DistillMetric::MeanSquared),
                    "l2" => Some(DistillMetric::L2),
                    _ => None,
                },
            ),
        }
    }

    fn get(&self) -> String {
        match self {
            Field::F64(x) => format!("{:?}", **x),
            Field::U64(x) => x.to_string(),
            Field::U32(x) => x.to_string(),
            Field::Usize(x) => x.to_string(),
            Field::OptF64(x) => x.map_or("none".into(), |v| format!("{v:?}")),
            Field::OptU64(x) => fmt_opt(x),
            Field::OptUsize(x) => fmt_opt(x),
            Field::OptStr(x) => fmt_opt(x),
            Field::Variant(x) => x.to_string(),
            Field::Variants(x) => join(x, |v| v.to_string()),
            Field::Seeds(x) => join(x, |v| v.to_string()),
            Field::Source(x) => x.as_str().into(),
            Field::Sources(x) => join(x, |v| v.as_str().into()),
            Field::Language(x) => x.as_str().into(),
            Field::Languages(x) => join(x, |v| v.as_str().into()),
            Field::Optimizer(x) => x.as_str().into(),
            Field::Metric(x) => metric_str(**x).into(),
        }
    }
}

impl ExperimentConfig {
    /// Every key with its slot and a one-line description.
    fn fields(&mut self) -> Vec<(&'static str, &'static str, Field<'_>)> {
        let ExperimentConfig {
            env,
            demos,
            pretrain,
            vae,
            rl,
            inverse,
            matrix,
            paths,
        } = self;
        let InverseConfig {
            pretrain_frames,
            rollout_episodes,
            epochs: inv_epochs,
            batch_size: inv_batch,
            optimizer: inv_opt,
            eval_fraction: inv_eval,
            patience: inv_patience,
            hidden: inv_hidden,
            seed: inv_seed,
            max_grad_norm: inv_clip,
            bc,
        } = inverse;
        let BcConfig {
            epochs: bc_epochs,
            batch_size: bc_batch,
            optimizer: bc_opt,
            eval_fraction: bc_eval,
            patience: bc_patience,
            seed: bc_seed,
            max_grad_norm: bc_clip,
        } = bc;
        vec![
            ("env.n_classes", "entity classes", Field::Usize(&mut env.n_classes)),
            ("env.holdout_fraction", "share of role pairs held out for evaluation", Field::F64(&mut env.holdout_fraction)),
            ("env.split_seed", "seed of the role-pair split", Field::U64(&mut env.split_seed)),
            ("env.height", "board rows", Field::Usize(&mut env.height)),
            ("env.width", "board columns", Field::Usize(&mut env.width)),
            ("env.max_steps", "episode step cap", Field::U32(&mut env.max_steps)),
            ("env.step_penalty", "reward subtracted each step", Field::F64(&mut env.step_penalty)),
            ("env.gamma", "discount of the environment", Field::F64(&mut env.gamma)),
            ("env.language", "language channels: full, no_message, no_manual, none", Field::Language(&mut env.language)),
            ("demos.source", "demonstrator: expert or random", Field::Source(&mut demos.source)),
            ("demos.count", "episodes to collect", Field::Usize(&mut demos.count)),
            ("demos.seed", "collection seed", Field::U64(&mut demos.seed)),
            ("pretrain.epochs", "dynamics pretraining epochs", Field::Usize(&mut pretrain.epochs)),
            ("pretrain.batch_size", "transitions per minibatch", Field::Usize(&mut pretrain.batch_size)),
            ("pretrain.lr", "Adam learning rate", Field::F64(&mut pretrain.optimizer.lr)),
            ("pretrain.eval_fraction", "held-out share of trajectories", Field::F64(&mut pretrain.eval_fraction)),
            ("pretrain.patience", "epochs without improvement before stopping", Field::Usize(&mut pretrain.patience)),
            ("pretrain.seed", "pretraining seed", Field::U64(&mut pretrain.seed)),
            ("pretrain.max_grad_norm", "global gradient-norm clip", Field::OptF64(&mut pretrain.max_grad_norm)),
            ("pretrain.max_batches_per_epoch", "minibatches per epoch cap", Field::OptUsize(&mut pretrain.max_batches_per_epoch)),
            ("vae.epochs", "VAE pretraining epochs", Field::Usize(&mut vae.epochs)),
            ("vae.batch_size", "observations per minibatch", Field::Usize(&mut vae.batch_size)),
            ("vae.lr", "Adam learning rate", Field::F64(&mut vae.optimizer.lr)),
            ("vae.beta", "KL weight", Field::F64(&mut vae.beta)),
            ("vae.seed", "VAE seed", Field::U64(&mut vae.seed)),
            ("vae.max_grad_norm", "global gradient-norm clip", Field::OptF64(&mut vae.max_grad_norm)),
            ("vae.max_batches_per_epoch", "minibatches per epoch cap", Field::OptUsize(&mut vae.max_batches_per_epoch)),
            ("rl.variant", "scratch, vae, ldd, ldd_minus_init, ldd_minus_distill, reward_shaping, inverse", Field::Variant(&mut rl.variant)),
            ("rl.seed", "learner seed", Field::U64(&mut rl.seed)),
            ("rl.total_frames", "environment frames", Field::U64(&mut rl.total_frames)),
            ("rl.n_actors", "actors stepped per unroll", Field::Usize(&mut rl.n_actors)),
            ("rl.unroll", "unroll length", Field::Usize(&mut rl.unroll)),
            ("rl.gamma", "discount", Field::F64(&mut rl.gamma)),
            ("rl.optimizer", "adam or rmsprop", Field::Optimizer(&mut rl.optimizer.kind)),
            ("rl.lr", "learning rate (default 1e-4)", Field::F64(&mut rl.optimizer.lr)),
            ("rl.adam_beta1", "Adam beta1 (default 0.99)", Field::F64(&mut rl.optimizer.beta1)),
            ("rl.adam_beta2", "Adam beta2 (default 0.999)", Field::F64(&mut rl.optimizer.beta2)),
            ("rl.eps", "optimizer epsilon (default 1e-6 Adam, 0.01 RMSProp)", Field::F64(&mut rl.optimizer.eps)),
            ("rl.rmsprop_alpha", "RMSProp decay (default 0.99)", Field::F64(&mut rl.optimizer.alpha)),
            ("rl.alpha_v", "baseline cost (default 0.5)", Field::F64(&mut rl.weights.alpha_v)),
            ("rl.alpha_d", "distillation weight", Field::F64(&mut rl.weights.alpha_d)),
            ("rl.beta_h", "entropy cost (default 0.05)", Field::F64(&mut rl.weights.beta_h)),
            ("rl.distill_metric", "mean_squared or l2", Field::Metric(&mut rl.distill_metric)),
            ("rl.alpha_d_anneal_frames", "frames over which alpha_d decays to zero", Field::OptU64(&mut rl.alpha_d_anneal_frames)),
            ("rl.max_grad_norm", "global gradient-norm clip", Field::OptF64(&mut rl.max_grad_norm)),
            ("rl.eval_every", "frames between greedy evaluations", Field::U64(&mut rl.eval_every)),
            ("rl.eval_episodes", "greedy episodes per split", Field::Usize(&mut rl.eval_episodes)),
            ("rl.checkpoint_every", "frames between checkpoints", Field::OptU64(&mut rl.checkpoint_every)),
            ("rl.shaping_lambda", "reward-shaping scale", Field::F64(&mut rl.shaping_lambda)),
            ("inverse.pretrain_frames", "scratch frames before labeled rollouts", Field::U64(pretrain_frames)),
            ("inverse.rollout_episodes", "labeled rollout episodes", Field::Usize(rollout_episodes)),
            ("inverse.epochs", "inverse-model epochs", Field::Usize(inv_epochs)),
            ("inverse.batch_size", "transitions per minibatch", Field::Usize(inv_batch)),
            ("inverse.lr", "Adam learning rate", Field::F64(&mut inv_opt.lr)),
            ("inverse.eval_fraction", "held-out share of rollouts", Field::F64(inv_eval)),
            ("inverse.patience", "epochs without improvement before stopping", Field::Usize(inv_patience)),
            ("inverse.hidden", "hidden width of the action classifier", Field::Usize(inv_hidden)),
            ("inverse.seed", "inverse-model seed", Field::U64(inv_seed)),
            ("inverse.max_grad_norm", "global gradient-norm clip", Field::OptF64(inv_clip)),
            ("bc.epochs", "behavior-cloning epochs", Field::Usize(bc_epochs)),
            ("bc.batch_size", "transitions per minibatch", Field::Usize(bc_batch)),
            ("bc.lr", "Adam learning rate", Field::F64(&mut bc_opt.lr)),
            ("bc.eval_fraction", "held-out share for early stopping", Field::OptF64(bc_eval)),
            ("bc.patience", "epochs without improvement before stopping", Field::Usize(bc_patience)),
            ("bc.seed", "behavior-cloning seed", Field::U64(bc_seed)),
            ("bc.max_grad_norm", "global gradient-norm clip", Field::OptF64(bc_clip)),
            ("matrix.variants", "variants to run", Field::Variants(&mut matrix.variants)),
            ("matrix.seeds", "seeds, paired across variants", Field::Seeds(&mut matrix.seeds)),
            ("matrix.demo_sources", "pretraining demonstrators", Field::Sources(&mut matrix.demo_sources)),
            ("matrix.languages", "language settings", Field::Languages(&mut matrix.languages)),
            ("matrix.workers", "cells run concurrently", Field::Usize(&mut matrix.workers)),
            ("paths.out_dir", "output directory", Field::OptStr(&mut paths.out_dir)),
            ("paths.demos", "demonstration store", Field::OptStr(&mut paths.demos)),
            ("paths.teacher", "teacher snapshot", Field::OptStr(&mut paths.teacher)),
            ("paths.init", "initial parameters for the vae variant", Field::OptStr(&mut paths.init)),
            ("paths.checkpoint", "checkpoint to evaluate", Field::OptStr(&mut paths.checkpoint)),
        ]
    }

    /// Every key in table order.
    pub fn keys() -> Vec<&'static str> {
        ExperimentConfig::default().fields().into_iter().map(|f| f.0).collect()
    }

    /// Parses `text`; `[section]` lines prefix the keys that follow.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(name) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = s.split_once('=') else {
                return Err(ConfigError::Syntax { line, text: raw.to_string() });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line, text: raw.to_string() });
            }
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            entries.push((line, key, v.trim().to_string()));
        }

        let mut fields = cfg.fields();
        let index: BTreeMap<&str, usize> = fields.iter().enumerate().map(|(i, f)| (f.0, i)).collect();
        let unknown: Vec<(usize, String)> = entries
            .iter()
            .filter(|(_, k, _)| !index.contains_key(k.as_str()))
            .map(|(l, k, _)| (*l, k.clone()))
            .collect();
        if !unknown.is_empty() {
            return Err(ConfigError::Unknown(unknown));
        }
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut lines: BTreeMap<&'static str, usize> = BTreeMap::new();
        for (line, key, value) in &entries {
            if let Some(&first) = seen.get(key) {
                return Err(ConfigError::Duplicate {
                    line: *line,
                    first,
                    key: key.clone(),
                });
            }
            seen.insert(key.clone(), *line);
            let f = &mut fields[index[key.as_str()]];
            lines.insert(f.0, *line);
            if !f.2.set(value) {
                return Err(ConfigError::Type {
                    line: *line,
                    key: key.clone(),
                    value: value.clone(),
                    expected: f.2.expected(),
                });
            }
        }
        drop(fields);
        if cfg.rl.optimizer.kind == OptimizerKind::Rmsprop {
            let d = OptimizerConfig::rmsprop();
            if !lines.contains_key("rl.lr") {
                cfg.rl.optimizer.lr = d.lr;
            }
            if !lines.contains_key("rl.eps") {
                cfg.rl.optimizer.eps = d.eps;
            }
        }
        cfg.check(&lines)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Ok(ExperimentConfig::parse(&text)?)
    }

    fn check(&self, lines: &BTreeMap<&'static str, usize>) -> Result<(), ConfigError> {
        let bad = |key: &'static str, msg: String| ConfigError::Invalid {
            line: lines.get(key).copied().unwrap_or(0),
            key: key.to_string(),
            msg,
        };
        let unit = |key: &'static str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(bad(key, format!("{v} must lie in (0, 1)")))
            }
        };
        unit("env.holdout_fraction", self.env.holdout_fraction)?;
        unit("pretrain.eval_fraction", self.pretrain.eval_fraction)?;
        unit("inverse.eval_fraction", self.inverse.eval_fraction)?;
        for (key, v) in [("env.gamma", self.env.gamma), ("rl.gamma", self.rl.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(key, format!("{v} outside [0, 1]")));
            }
        }
        for (key, v) in [
            ("rl.alpha_v", self.rl.weights.alpha_v),
            ("rl.alpha_d", self.rl.weights.alpha_d),
            ("rl.beta_h", self.rl.weights.beta_h),
            ("rl.shaping_lambda", self.rl.shaping_lambda),
            ("env.step_penalty", self.env.step_penalty),
        ] {
            if v < 0.0 {
                return Err(bad(key, format!("{v} must be >= 0")));
            }
        }
        for (key, v) in [
            ("pretrain.lr", self.pretrain.optimizer.lr),
            ("vae.lr", self.vae.optimizer.lr),
            ("rl.lr", self.rl.optimizer.lr),
            ("inverse.lr", self.inverse.optimizer.lr),
            ("bc.lr", self.inverse.bc.optimizer.lr),
        ] {
            if v <= 0.0 {
                return Err(bad(key, format!("{v} must be > 0")));
            }
        }
        for (key, v) in [
            ("demos.count", self.demos.count),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("vae.batch_size", self.vae.batch_size),
            ("rl.n_actors", self.rl.n_actors),
            ("rl.unroll", self.rl.unroll),
            ("rl.eval_episodes", self.rl.eval_episodes),
            ("inverse.batch_size", self.inverse.batch_size),
            ("bc.batch_size", self.inverse.bc.batch_size),
            ("matrix.workers", self.matrix.workers),
        ] {
            if v == 0 {
                return Err(bad(key, "must be positive".into()));
            }
        }
        if self.rl.eval_every == 0 {
            return Err(bad("rl.eval_every", "must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text listing every key, with descriptions as comments.
    /// Parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        let mut last = "";
        for (key, doc, f) in copy.fields() {
            let section = key.split('.').next().unwrap_or("");
            if section != last {
                if !last.is_empty() {
                    out.push('\n');
                }
                last = section;
            }
            out.push_str(&format!("# {doc}\n{key}={}\n", f.get()));
        }
        out
    }

    /// Value of `key` as it would be written out.
    pub fn get(&self, key: &str) -> Option<String> {
        let mut copy = self.clone();
        copy.fields().into_iter().find(|f| f.0 == key).map(|f| f.2.get())
    }

    /// Path-valued key that a command cannot run without.
    pub fn require_path(&self, key: &str) -> Result<String, ConfigError> {
        match self.get(key).as_deref() {
            Some("none") | None => Err(ConfigError::Missing { key: key.to_string() }),
            Some(v) => Ok(v.to_string()),
        }
    }

    /// Learner config for one run of `variant`.
    pub fn train_config(&self, variant: Variant, seed: u64, language: Language) -> TrainConfig {
        let r = &self.rl;
        let mut t = TrainConfig::new(variant, seed);
        t.total_frames = r.total_frames;
        t.n_actors = r.n_actors;
        t.unroll = r.unroll;
        t.gamma = r.gamma;
        t.optimizer = r.optimizer;
        t.weights = r.weights;
        t.distill_metric = r.distill_metric;
        t.alpha_d_anneal_frames = r.alpha_d_anneal_frames;
        t.max_grad_norm = r.max_grad_norm;
        t.eval_every = r.eval_every;
        t.eval_episodes = r.eval_episodes;
        t.checkpoint_every = r.checkpoint_every;
        t.shaping_lambda = (variant == Variant::RewardShaping).then_some(r.shaping_lambda);
        t.inverse = (variant == Variant::Inverse).then(|| InverseConfig {
            seed: mix(self.inverse.seed, seed),
            ..self.inverse.clone()
        });
        t.language = language.channels();
        t
    }
}

fn mix(a: u64, b: u64) -> u64 {
    crate::hash::mix_seed(a, b)
}

impl std::str::FromStr for ExperimentConfig {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        ExperimentConfig::parse(s)
    }
}
