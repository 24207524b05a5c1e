//! Shared representation network with policy, value and dynamics heads,
//! plus the frozen teacher used for distillation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EpisodeConfig, Observation, Vocab, N_ACTIONS, SYM_ENTITY_BASE};
use crate::numerics::{Graph, NumericsError, ParamGroup, ParamStore, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("model config: {0}")]
    Config(String),
    #[error("incompatible observation: {0}")]
    Observation(String),
    #[error("architecture mismatch: {0}")]
    Mismatch(String),
}

/// Distance between teacher and student representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMetric {
    /// Mean of squared coordinate differences over batch and width.
    MeanSquared,
    /// Euclidean distance per observation, averaged over the batch.
    L2,
}

impl std::str::FromStr for DistillMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean_squared" => Ok(DistillMetric::MeanSquared),
            "l2" => Ok(DistillMetric::L2),
            _ => Err(format!("unknown distill metric {s:?} (expected mean_squared or l2)")),
        }
    }
}

impl DistillMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillMetric::MeanSquared => "mean_squared",
            DistillMetric::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub n_symbols: usize,
    pub n_tokens: usize,
    /// Width of the per-cell symbol embedding.
    pub symbol_dim: usize,
    /// Width of the token embedding table.
    pub token_dim: usize,
    /// Query/key width of the cell-over-manual attention.
    pub attn_dim: usize,
    /// Width of the attended text vector appended to each cell.
    pub value_dim: usize,
    pub hidden: usize,
    /// Representation width R shared by all heads.
    pub rep_dim: usize,
}

impl ModelConfig {
    pub fn for_env(env: &EpisodeConfig, vocab: &Vocab) -> Self {
        ModelConfig {
            height: env.height,
            width: env.width,
            n_symbols: vocab.n_symbols(),
            n_tokens: vocab.n_tokens(),
            symbol_dim: 16,
            token_dim: 64,
            attn_dim: 16,
            value_dim: 16,
            hidden: 128,
            rep_dim: 128,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Trunk input: flattened cell features, pooled message, step parity.
    pub fn trunk_input(&self) -> usize {
        self.cells() * (self.symbol_dim + self.value_dim) + self.token_dim + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            self.height,
            self.width,
            self.n_symbols,
            self.n_tokens,
            self.symbol_dim,
            self.token_dim,
            self.attn_dim,
            self.value_dim,
            self.hidden,
            self.rep_dim,
        ];
        if dims.contains(&0) {
            return Err(ModelError::Config(format!("zero dimension in {self:?}")));
        }
        Ok(())
    }

    pub fn to_metadata(&self) -> Vec<(String, String)> {
        [
            ("model.height", self.height),
            ("model.width", self.width),
            ("model.n_symbols", self.n_symbols),
            ("model.n_tokens", self.n_tokens),
            ("model.symbol_dim", self.symbol_dim),
            ("model.token_dim", self.token_dim),
            ("model.attn_dim", self.attn_dim),
            ("model.value_dim", self.value_dim),
            ("model.hidden", self.hidden),
            ("model.rep_dim", self.rep_dim),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub fn from_metadata(meta: &[(String, String)]) -> Result<Self, ModelError> {
        let get = |key: &str| -> Result<usize, ModelError> {
            let raw = meta
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks {key}")))?;
            raw.parse()
                .map_err(|_| ModelError::Config(format!("{key}={raw} is not an integer")))
        };
        let cfg = ModelConfig {
            height: get("model.height")?,
            width: get("model.width")?,
            n_symbols: get("model.n_symbols")?,
            n_tokens: get("model.n_tokens")?,
            symbol_dim: get("model.symbol_dim")?,
            token_dim: get("model.token_dim")?,
            attn_dim: get("model.attn_dim")?,
            value_dim: get("model.value_dim")?,
            hidden: get("model.hidden")?,
            rep_dim: get("model.rep_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let hw = self.cells();
        vec![
            ("rep.symbol_emb", vec![self.n_symbols, self.symbol_dim]),
            ("rep.token_emb", vec![self.n_tokens, self.token_dim]),
            ("rep.attn_q", vec![self.symbol_dim, self.attn_dim]),
            ("rep.attn_k", vec![self.token_dim, self.attn_dim]),
            ("rep.attn_v", vec![self.token_dim, self.value_dim]),
            ("rep.l1.w", vec![self.trunk_input(), self.hidden]),
            ("rep.l1.b", vec![self.hidden]),
            ("rep.l2.w", vec![self.hidden, self.rep_dim]),
            ("rep.l2.b", vec![self.rep_dim]),
            ("pi.w", vec![self.rep_dim, N_ACTIONS]),
            ("pi.b", vec![N_ACTIONS]),
            ("v.w", vec![self.rep_dim, 1]),
            ("v.b", vec![1]),
            ("dyn.w", vec![self.rep_dim, hw * self.n_symbols]),
            ("dyn.b", vec![hw * self.n_symbols]),
            ("dyn.persist", vec![self.n_symbols, self.n_symbols]),
        ]
    }
}

/// Architecture plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Embeddings uniform in +-0.05, trunk layers uniform in
    /// +-1/sqrt(fan_in), heads zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.shapes() {
            let n: usize = shape.iter().product();
            let bound = if ParamGroup::of(name) != ParamGroup::Rep {
                0.0
            } else if name.ends_with("_emb") {
                0.05
            } else {
                let fan_in = if name.ends_with(".b") {
                    // bias shares the fan-in of its weight
                    if name.starts_with("rep.l1") {
                        config.trunk_input()
                    } else {
                        config.hidden
                    }
                } else {
                    shape[0]
                };
                1.0 / (fan_in as f64).sqrt()
            };
            let data = if bound == 0.0 {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Model { config, params })
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.params)
    }

    /// Checks that a parameter store carries every tensor of `config` with
    /// the right shape.
    pub fn check_params(config: &ModelConfig, params: &ParamStore, groups: impl Fn(ParamGroup) -> bool) -> Result<(), ModelError> {
        for (name, shape) in config.shapes() {
            if !groups(ParamGroup::of(name)) {
                continue;
            }
            let t = params
                .by_name(name)
                .ok_or_else(|| ModelError::Mismatch(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Mismatch(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, extra: &[(String, String)]) -> Result<(), ModelError> {
        let mut meta = self.config.to_metadata();
        meta.extend_from_slice(extra);
        self.params.save(path, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<(String, String)>), ModelError> {
        let (params, meta) = ParamStore::load(path)?;
        let config = ModelConfig::from_metadata(&meta)?;
        Model::check_params(&config, &params, |_| true)?;
        Ok((Model { config, params }, meta))
    }
}

fn check_obs(cfg: &ModelConfig, batch: &[&Observation]) -> Result<usize, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Observation("empty batch".into()));
    }
    let lines = batch[0].manual.lines.len();
    for o in batch {
        if o.height != cfg.height || o.width != cfg.width || o.grid.len() != cfg.cells() {
            return Err(ModelError::Observation(format!(
                "grid {}x{} does not match model {}x{}",
                o.height, o.width, cfg.height, cfg.width
            )));
        }
        if o.manual.lines.len() != lines {
            return Err(ModelError::Observation("manual line counts differ within a batch".into()));
        }
    }
    Ok(lines)
}

/// Representation `[B, R]` of a batch of observations. Parameters are read
/// from the graph's store under the `rep.` prefix.
pub fn encode(cfg: &ModelConfig, g: &mut Graph<'_>, batch: &[&Observation]) -> Result<Var, ModelError> {
    let n_lines = check_obs(cfg, batch)?;
    let b = batch.len();
    let hw = cfg.cells();

    let sym_table = g.param("rep.symbol_emb")?;
    let tok_table = g.param("rep.token_emb")?;
    let ids: Vec<usize> = batch
        .iter()
        .flat_map(|o| o.grid.iter().map(|&s| s as usize))
        .collect();
    let cells = g.embedding(sym_table, &ids)?;

    let attended = if n_lines == 0 {
        g.constant(Tensor::zeros(&[b * hw, cfg.value_dim]))
    } else {
        let bags: Vec<Vec<usize>> = batch
            .iter()
            .flat_map(|o| o.manual.lines.iter().map(|l| l.iter().map(|&t| t as usize).collect()))
            .collect();
        let lines = g.embedding_bag_mean(tok_table, bags)?;
        let wq = g.param("rep.attn_q")?;
        let wk = g.param("rep.attn_k")?;
        let wv = g.param("rep.attn_v")?;
        let q = g.matmul(cells, wq)?;
        let q = g.reshape(q, &[b, hw, cfg.attn_dim])?;
        let k = g.matmul(lines, wk)?;
        let k = g.reshape(k, &[b, n_lines, cfg.attn_dim])?;
        let v = g.matmul(lines, wv)?;
        let v = g.reshape(v, &[b, n_lines, cfg.value_dim])?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (cfg.attn_dim as f64).sqrt())?;
        let weights = g.softmax_last(scores)?;
        let att = g.bmm(weights, v, false)?;
        let att = g.reshape(att, &[b * hw, cfg.value_dim])?;
        // only entity cells are described by the manual
        let mut mask = vec![0.0; b * hw * cfg.value_dim];
        for (cell, row) in ids.iter().zip(mask.chunks_mut(cfg.value_dim)) {
            if *cell >= SYM_ENTITY_BASE as usize {
                row.fill(1.0);
            }
        }
        let mask = g.constant(Tensor::new(vec![b * hw, cfg.value_dim], mask)?);
        g.mul(att, mask)?
    };
    let cell_feats = g.concat_last(&[cells, attended])?;
    let grid_feats = g.reshape(cell_feats, &[b, hw * (cfg.symbol_dim + cfg.value_dim)])?;

    let msgs: Vec<Vec<usize>> = batch
        .iter()
        .map(|o| o.message.iter().map(|&t| t as usize).collect())
        .collect();
    let msg = g.embedding_bag_mean(tok_table, msgs)?;
    let parity = g.constant(Tensor::new(
        vec![b, 1],
        batch.iter().map(|o| (o.step_index % 2) as f64).collect(),
    )?);
    let x = g.concat_last(&[grid_feats, msg, parity])?;

    let h = linear(g, x, "rep.l1")?;
    let h = g.relu(h)?;
    let h = linear(g, h, "rep.l2")?;
    Ok(g.relu(h)?)
}

fn linear(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var, ModelError> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_bias(y, b)?)
}

/// `[B, 5]` action logits.
pub fn policy_logits(g: &mut Graph<'_>, rep: Var) -> Result<Var, ModelError> {
    linear(g, rep, "pi")
}

/// `[B]` state values.
pub fn value(g: &mut Graph<'_>, rep: Var) -> Result<Var, ModelError> {
    let v = linear(g, rep, "v")?;
    let b = g.value(v).shape()[0];
    Ok(g.reshape(v, &[b])?)
}

/// `[B * H * W, n_symbols]` next-frame logits, cells in row-major order.
/// Each cell adds a learned logit row indexed by its current symbol.
pub fn dynamics_logits(cfg: &ModelConfig, g: &mut Graph<'_>, rep: Var, batch: &[&Observation]) -> Result<Var, ModelError> {
    let y = linear(g, rep, "dyn")?;
    let b = g.value(y).shape()[0];
    if b != batch.len() {
        return Err(ModelError::Mismatch(format!("{b} representations for {} observations", batch.len())));
    }
    let y = g.reshape(y, &[b * cfg.cells(), cfg.n_symbols])?;
    let ids: Vec<usize> = batch
        .iter()
        .flat_map(|o| o.grid.iter().map(|&s| s as usize))
        .collect();
    let table = g.param("dyn.persist")?;
    let persist = g.embedding(table, &ids)?;
    Ok(g.add(y, persist)?)
}

/// Forward pass outside of any training graph.
pub fn encode_values(cfg: &ModelConfig, params: &ParamStore, batch: &[&Observation]) -> Result<Tensor, ModelError> {
    let mut g = Graph::with_params(params);
    let rep = encode(cfg, &mut g, batch)?;
    Ok(g.value(rep).clone())
}

/// Softmax policy for each observation, outside of any training graph.
pub fn action_probs(cfg: &ModelConfig, params: &ParamStore, batch: &[&Observation]) -> Result<Vec<[f64; N_ACTIONS]>, ModelError> {
    let mut g = Graph::with_params(params);
    let rep = encode(cfg, &mut g, batch)?;
    let logits = policy_logits(&mut g, rep)?;
    let probs = g.softmax_last(logits)?;
    Ok(g.value(probs)
        .data()
        .chunks(N_ACTIONS)
        .map(|row| {
            let mut p = [0.0; N_ACTIONS];
            p.copy_from_slice(row);
            p
        })
        .collect())
}

/// Frozen copy of the representation and dynamics parameters.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    config: ModelConfig,
    params: ParamStore,
    metadata: Vec<(String, String)>,
    hash: u64,
}

impl TeacherSnapshot {
    /// Deep-copies the `rep.` and `dyn.` groups of `model`. `provenance`
    /// typically names the pretraining run and the demo set hash.
    pub fn snapshot(model: &Model, provenance: &[(String, String)]) -> Self {
        let params = model
            .params
            .subset(|gr| matches!(gr, ParamGroup::Rep | ParamGroup::Dynamics));
        let hash = params.content_hash();
        TeacherSnapshot {
            config: model.config,
            params,
            metadata: provenance.to_vec(),
            hash,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn metadata(&self) -> &[(String, String)] {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Content hash fixed at creation.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    /// Recomputes the hash from the stored tensors.
    pub fn verify(&self) -> bool {
        self.params.content_hash() == self.hash
    }

    pub fn encode(&self, batch: &[&Observation]) -> Result<Tensor, ModelError> {
        encode_values(&self.config, &self.params, batch)
    }

    /// Teacher's next-frame symbol predictions, `B * H * W` argmaxes.
    pub fn predict_next(&self, batch: &[&Observation]) -> Result<Vec<usize>, ModelError> {
        let mut g = Graph::with_params(&self.params);
        let rep = encode(&self.config, &mut g, batch)?;
        let logits = dynamics_logits(&self.config, &mut g, rep, batch)?;
        Ok(g.value(logits).argmax_rows())
    }

    /// A model whose `rep.`/`dyn.` groups are the teacher's and whose heads
    /// are freshly zeroed.
    pub fn to_model(&self) -> Result<Model, ModelError> {
        let mut m = Model::init(self.config, 0)?;
        m.params.copy_from(&self.params, |_| true)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut meta = self.config.to_metadata();
        meta.extend(self.metadata.iter().cloned());
        self.params.save(path, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (params, meta) = ParamStore::load(path)?;
        let config = ModelConfig::from_metadata(&meta)?;
        Model::check_params(&config, &params, |gr| matches!(gr, ParamGroup::Rep | ParamGroup::Dynamics))?;
        let metadata = meta.into_iter().filter(|(k, _)| !k.starts_with("model.")).collect();
        let hash = params.content_hash();
        Ok(TeacherSnapshot {
            config,
            params,
            metadata,
            hash,
        })
    }
}

/// J_d between the student representation `student_rep` (on the graph) and
/// the teacher's representation of the same observations. No gradient
/// reaches the teacher.
pub fn distill_loss(
    g: &mut Graph<'_>,
    student_cfg: &ModelConfig,
    student_rep: Var,
    batch: &[&Observation],
    teacher: &TeacherSnapshot,
    metric: DistillMetric,
) -> Result<Var, ModelError> {
    if teacher.config().rep_dim != student_cfg.rep_dim {
        return Err(ModelError::Mismatch(format!(
            "teacher width {} vs student width {}",
            teacher.config().rep_dim,
            student_cfg.rep_dim
        )));
    }
    let target = teacher.encode(batch)?;
    distill_against(g, student_rep, target, metric)
}

/// J_d against a precomputed target representation `[B, R]`.
pub fn distill_against(g: &mut Graph<'_>, student_rep: Var, target: Tensor, metric: DistillMetric) -> Result<Var, ModelError> {
    let shape = g.value(student_rep).shape().to_vec();
    if target.shape() != shape.as_slice() {
        return Err(ModelError::Mismatch(format!(
            "teacher representation {:?} vs student {:?}",
            target.shape(),
            shape
        )));
    }
    let t = g.constant(target);
    match metric {
        DistillMetric::MeanSquared => {
            let sq = g.squared_l2(student_rep, t)?;
            let n = shape.iter().product::<usize>() as f64;
            Ok(g.scale(sq, 1.0 / n)?)
        }
        DistillMetric::L2 => {
            let d = g.sub(student_rep, t)?;
            let sq = g.mul(d, d)?;
            let rows = g.sum_last(sq)?;
            let eps = g.constant(Tensor::full(g.value(rows).shape(), 1e-12));
            let rows = g.add(rows, eps)?;
            let norms = g.sqrt(rows)?;
            Ok(g.mean(norms)?)
        }
    }
}

#[cfg(test)]
mod tests;
