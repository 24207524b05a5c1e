//! Next-frame dynamics pretraining on unlabeled demonstrations, the
//! frame-accuracy metric and the VAE baseline.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::demos::{split_holdout, DemoError, DemoStore};
use crate::env::Observation;
use crate::hash::mix_seed;
use crate::model::{dynamics_logits, encode, Model, ModelConfig, ModelError, TeacherSnapshot};
use crate::numerics::{clip_global_norm, Graph, NumericsError, Optimizer, OptimizerConfig, ParamGroup, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("empty demonstration store")]
    Empty,
    #[error("pair {0} is not consecutive (step index mismatch)")]
    NotConsecutive(usize),
    #[error("invalid pretraining config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Transitions per minibatch.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub eval_fraction: f64,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Observations conditioned on; only 1 is supported.
    pub frame_stack: usize,
    pub max_grad_norm: Option<f64>,
    /// Cap on minibatches per epoch; `None` sweeps every transition.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            batch_size: 64,
            optimizer: OptimizerConfig::adam().with_lr(1e-3),
            eval_fraction: 0.1,
            patience: 30,
            seed: 0,
            frame_stack: 1,
            max_grad_norm: Some(40.0),
            max_batches_per_epoch: Some(100),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(PretrainError::Config(format!(
                "eval_fraction {} outside (0,1)",
                self.eval_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(PretrainError::Config("epochs and batch_size must be positive".into()));
        }
        if self.frame_stack != 1 {
            return Err(PretrainError::Config(format!(
                "frame_stack {} unsupported (environment is Markov; use 1)",
                self.frame_stack
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters became the teacher.
    pub best_epoch: usize,
    pub best_heldout_acc: f64,
    /// Loss of the untrained model on the first training minibatch.
    pub initial_loss: f64,
    pub majority_baseline: f64,
    pub demo_policy: String,
    pub demo_count: usize,
    pub checkpoint: Option<std::path::PathBuf>,
}

impl PretrainReport {
    pub fn final_heldout_acc(&self) -> f64 {
        self.best_heldout_acc
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,heldout_acc\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{:.6},{:.6}\n", r.epoch, r.train_loss, r.heldout_acc));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PretrainError> {
        let mut f = std::fs::File::create(path).map_err(|e| PretrainError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| PretrainError::Io(e.to_string()))
    }
}

fn check_pairs(pairs: &[(&Observation, &Observation)]) -> Result<(), PretrainError> {
    if pairs.is_empty() {
        return Err(PretrainError::Empty);
    }
    for (i, (a, b)) in pairs.iter().enumerate() {
        if b.step_index != a.step_index + 1 {
            return Err(PretrainError::NotConsecutive(i));
        }
    }
    Ok(())
}

/// J_delta: mean over pairs and cells of the cross-entropy between the
/// predicted and the true next-frame symbol.
pub fn dynamics_loss(cfg: &ModelConfig, g: &mut Graph<'_>, pairs: &[(&Observation, &Observation)]) -> Result<Var, PretrainError> {
    check_pairs(pairs)?;
    let cur: Vec<&Observation> = pairs.iter().map(|p| p.0).collect();
    let targets: Vec<usize> = pairs
        .iter()
        .flat_map(|p| p.1.grid.iter().map(|&s| s as usize))
        .collect();
    let rep = encode(cfg, g, &cur)?;
    let logits = dynamics_logits(cfg, g, rep, &cur)?;
    Ok(g.cross_entropy(logits, &targets)?)
}

/// Fraction of `(cell, transition)` predictions equal to the truth, for an
/// arbitrary predictor mapping a batch of current frames to `B*H*W`
/// symbols. Batches of at most 256 transitions.
pub fn frame_accuracy_with<F>(heldout: &DemoStore, mut predict: F) -> Result<f64, PretrainError>
where
    F: FnMut(&[&Observation]) -> Result<Vec<usize>, PretrainError>,
{
    let trans = heldout.transitions();
    if trans.is_empty() {
        return Err(PretrainError::Empty);
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in trans.chunks(256) {
        let cur: Vec<&Observation> = chunk
            .iter()
            .map(|&(i, t)| &heldout.trajectories[i].observations[t])
            .collect();
        let pred = predict(&cur)?;
        let mut k = 0;
        for &(i, t) in chunk {
            for &s in &heldout.trajectories[i].observations[t + 1].grid {
                hits += (pred[k] == s as usize) as usize;
                total += 1;
                k += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Argmax accuracy of the dynamics head described by `params`.
pub fn eval_frame_accuracy(cfg: &ModelConfig, params: &crate::numerics::ParamStore, heldout: &DemoStore) -> Result<f64, PretrainError> {
    frame_accuracy_with(heldout, |cur| {
        let mut g = Graph::with_params(params);
        let rep = encode(cfg, &mut g, cur)?;
        let logits = dynamics_logits(cfg, &mut g, rep, cur)?;
        Ok(g.value(logits).argmax_rows())
    })
}

/// Accuracy of predicting, for every cell, its most frequent next-frame
/// symbol in `heldout` (lowest symbol id on ties).
pub fn majority_baseline(heldout: &DemoStore, n_symbols: usize) -> Result<f64, PretrainError> {
    let trans = heldout.transitions();
    if trans.is_empty() {
        return Err(PretrainError::Empty);
    }
    let cells = heldout.header.height * heldout.header.width;
    let mut counts = vec![vec![0usize; n_symbols]; cells];
    for &(i, t) in &trans {
        for (c, &s) in heldout.trajectories[i].observations[t + 1].grid.iter().enumerate() {
            counts[c][s as usize] += 1;
        }
    }
    let hits: usize = counts.iter().map(|c| c.iter().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / (trans.len() * cells) as f64)
}

/// Minimizes J_delta over the `rep.` and `dyn.` groups; the policy and
/// value heads stay at their zero initialization. The teacher is the
/// snapshot at the best held-out accuracy.
pub fn pretrain_dynamics(
    store: &DemoStore,
    model_cfg: ModelConfig,
    config: &PretrainConfig,
) -> Result<(Model, TeacherSnapshot, PretrainReport), PretrainError> {
    config.validate()?;
    if store.n_transitions() == 0 {
        return Err(PretrainError::Empty);
    }
    let (train, heldout) = split_holdout(store, config.eval_fraction, mix_seed(config.seed, 1))?;
    let mut model = Model::init(model_cfg, mix_seed(config.seed, 2))?;
    let mut opt = Optimizer::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3));
    let keep = |g: ParamGroup| matches!(g, ParamGroup::Rep | ParamGroup::Dynamics);
    let provenance = vec![
        ("pretrain.seed".to_string(), config.seed.to_string()),
        ("demo.policy".to_string(), store.header.policy.to_string()),
        ("demo.count".to_string(), store.len().to_string()),
        ("demo.hash".to_string(), format!("{:016x}", demo_hash(store)?)),
    ];

    let mut transitions = train.transitions();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, TeacherSnapshot)> = None;
    let mut since_best = 0;
    let mut initial_loss = f64::NAN;
    for epoch in 1..=config.epochs {
        transitions.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in transitions.chunks(config.batch_size) {
            if config.max_batches_per_epoch.is_some_and(|m| batches >= m) {
                break;
            }
            let pairs: Vec<(&Observation, &Observation)> = chunk
                .iter()
                .map(|&(i, t)| {
                    let tr = &train.trajectories[i];
                    (&tr.observations[t], &tr.observations[t + 1])
                })
                .collect();
            let mut grads = {
                let mut g = model.graph();
                let loss = dynamics_loss(&model.config, &mut g, &pairs)?;
                let l = g.scalar_value(loss);
                if initial_loss.is_nan() {
                    initial_loss = l;
                }
                loss_sum += l;
                g.backward(loss)?
            };
            if let Some(m) = config.max_grad_norm {
                clip_global_norm(&mut grads, m);
            }
            opt.step_groups(&mut model.params, &grads, keep)?;
            batches += 1;
        }
        let acc = eval_frame_accuracy(&model.config, &model.params, &heldout)?;
        let train_loss = loss_sum / batches.max(1) as f64;
        log::info!("pretrain epoch {epoch}: loss {train_loss:.4} heldout acc {acc:.4}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            heldout_acc: acc,
        });
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            let mut meta = provenance.clone();
            meta.push(("pretrain.epoch".into(), epoch.to_string()));
            meta.push(("pretrain.heldout_acc".into(), format!("{acc}")));
            best = Some((acc, epoch, TeacherSnapshot::snapshot(&model, &meta)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_acc, best_epoch, teacher) = best.expect("at least one epoch ran");
    let model = teacher.to_model()?;
    let report = PretrainReport {
        epochs,
        best_epoch,
        best_heldout_acc: best_acc,
        initial_loss,
        majority_baseline: majority_baseline(&heldout, model_cfg.n_symbols)?,
        demo_policy: store.header.policy.to_string(),
        demo_count: store.len(),
        checkpoint: None,
    };
    Ok((model, teacher, report))
}

fn demo_hash(store: &DemoStore) -> Result<u64, PretrainError> {
    Ok(crate::hash::fnv1a64(&store.to_bytes()?))
}

/// `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)` averaged over rows.
pub fn kl_standard_normal(g: &mut Graph<'_>, mu: Var, logvar: Var) -> Result<Var, PretrainError> {
    let rows = g.value(mu).shape()[0] as f64;
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, logvar)?;
    let s = g.sum(b)?;
    let n = g.value(mu).len() as f64;
    let shifted = g.scale(s, 0.5 / rows)?;
    let offset = g.constant(Tensor::scalar(-0.5 * n / rows));
    Ok(g.add(shifted, offset)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub beta: f64,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            epochs: 10,
            batch_size: 64,
            optimizer: OptimizerConfig::adam().with_lr(1e-3),
            beta: 1.0,
            seed: 0,
            max_grad_norm: Some(40.0),
            max_batches_per_epoch: Some(100),
        }
    }
}

/// Negative ELBO for a batch: per-cell reconstruction cross-entropy summed
/// over cells plus `beta` times the KL term, both averaged over the batch.
/// The mean of the posterior is the `f_rep` output.
pub fn vae_loss(
    cfg: &ModelConfig,
    g: &mut Graph<'_>,
    batch: &[&Observation],
    noise: Tensor,
    beta: f64,
) -> Result<Var, PretrainError> {
    let b = batch.len();
    let mu = encode(cfg, g, batch)?;
    let lw = g.param("aux.vae.logvar.w")?;
    let lb = g.param("aux.vae.logvar.b")?;
    let lv = g.matmul(mu, lw)?;
    let logvar = g.add_bias(lv, lb)?;
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let eps = g.constant(noise);
    let scaled = g.mul(std, eps)?;
    let z = g.add(mu, scaled)?;
    let dw = g.param("aux.vae.dec.w")?;
    let db = g.param("aux.vae.dec.b")?;
    let d = g.matmul(z, dw)?;
    let d = g.add_bias(d, db)?;
    let logits = g.reshape(d, &[b * cfg.cells(), cfg.n_symbols])?;
    let targets: Vec<usize> = batch.iter().flat_map(|o| o.grid.iter().map(|&s| s as usize)).collect();
    let ce = g.cross_entropy(logits, &targets)?;
    let recon = g.scale(ce, cfg.cells() as f64)?;
    let kl = kl_standard_normal(g, mu, logvar)?;
    let kl = g.scale(kl, beta)?;
    Ok(g.add(recon, kl)?)
}

/// Trains `rep.` as a VAE encoder over single frames and returns a model
/// whose representation is the posterior mean; decoder and log-variance
/// parameters are dropped and the heads are zero.
pub fn vae_pretrain(store: &DemoStore, model_cfg: ModelConfig, config: &VaeConfig) -> Result<Model, PretrainError> {
    let frames: Vec<(usize, usize)> = store
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    if frames.is_empty() {
        return Err(PretrainError::Empty);
    }
    let mut model = Model::init(model_cfg, mix_seed(config.seed, 2))?;
    let r = model_cfg.rep_dim;
    let hw_s = model_cfg.cells() * model_cfg.n_symbols;
    model.params.insert("aux.vae.logvar.w", Tensor::zeros(&[r, r]));
    model.params.insert("aux.vae.logvar.b", Tensor::zeros(&[r]));
    let bound = 1.0 / (r as f64).sqrt();
    let mut wrng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 4));
    let dec: Vec<f64> = (0..r * hw_s)
        .map(|_| rand::Rng::gen_range(&mut wrng, -bound..bound))
        .collect();
    model.params.insert("aux.vae.dec.w", Tensor::new(vec![r, hw_s], dec)?);
    model.params.insert("aux.vae.dec.b", Tensor::zeros(&[hw_s]));

    let mut opt = Optimizer::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3));
    let mut order = frames;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if config.max_batches_per_epoch.is_some_and(|m| batches >= m) {
                break;
            }
            let batch: Vec<&Observation> = chunk
                .iter()
                .map(|&(i, k)| &store.trajectories[i].observations[k])
                .collect();
            let noise: Vec<f64> = (0..batch.len() * r).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise = Tensor::new(vec![batch.len(), r], noise)?;
            let mut grads = {
                let mut g = model.graph();
                let loss = vae_loss(&model.config, &mut g, &batch, noise, config.beta)?;
                total += g.scalar_value(loss);
                g.backward(loss)?
            };
            if let Some(m) = config.max_grad_norm {
                clip_global_norm(&mut grads, m);
            }
            opt.step_groups(&mut model.params, &grads, |gr| matches!(gr, ParamGroup::Rep | ParamGroup::Aux))?;
            batches += 1;
        }
        log::info!("vae epoch {epoch}: loss {:.4}", total / batches.max(1) as f64);
    }
    let mut out = Model::init(model_cfg, 0)?;
    out.params.copy_from(&model.params, |gr| gr == ParamGroup::Rep)?;
    Ok(out)
}

#[cfg(test)]
mod tests;
