//! Demonstration sets: collection, a self-checking binary format and
//! held-out splitting.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{
    expert_action, Action, EnvError, GridWorld, LanguageChannels, Manual, Observation, Outcome, Vocab, N_ACTIONS,
};
use crate::hash::{mix_seed, Fnv1a};
use crate::model::{action_probs, Model, ModelError};

pub const DEMO_MAGIC: &[u8; 4] = b"LDDM";
pub const DEMO_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("not a demo store (bad magic)")]
    BadMagic,
    #[error("unsupported demo store version {0}")]
    Version(u32),
    #[error("checksum mismatch: header says {expected:016x}, content hashes to {actual:016x}")]
    Checksum { expected: u64, actual: u64 },
    #[error("vocabulary hash mismatch: store {store:016x}, vocabulary {vocab:016x}")]
    VocabHash { store: u64, vocab: u64 },
    #[error("environment hash mismatch: store {store:016x}, environment {env:016x}")]
    EnvHash { store: u64, env: u64 },
    #[error("truncated demo store")]
    Truncated,
    #[error("malformed demo store: {0}")]
    Format(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("replay of trajectory {index} diverged at step {step}")]
    Replay { index: usize, step: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

impl DemoError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            DemoError::BadMagic => 10,
            DemoError::Version(_) => 11,
            DemoError::Checksum { .. } => 12,
            DemoError::VocabHash { .. } => 13,
            DemoError::EnvHash { .. } => 14,
            DemoError::Truncated => 15,
            DemoError::Format(_) => 16,
            DemoError::Invalid(_) => 17,
            DemoError::Replay { .. } => 18,
            DemoError::Env(_) => 19,
            DemoError::Model(_) => 20,
            DemoError::Io(_) => 21,
        }
    }
}

/// Which policy produced a store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyId {
    Expert,
    Random,
    /// A learner checkpoint taken after the given number of frames.
    Agent(u64),
    /// Pseudo-labels from an inverse model applied to another source.
    Pseudo(Box<PolicyId>),
}

impl std::fmt::Display for PolicyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicyId::Expert => write!(f, "expert"),
            PolicyId::Random => write!(f, "random"),
            PolicyId::Agent(k) => write!(f, "agent@{k}"),
            PolicyId::Pseudo(inner) => write!(f, "pseudo:{inner}"),
        }
    }
}

impl std::str::FromStr for PolicyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix("pseudo:") {
            return Ok(PolicyId::Pseudo(Box::new(rest.parse()?)));
        }
        if let Some(k) = s.strip_prefix("agent@") {
            return k
                .parse()
                .map(PolicyId::Agent)
                .map_err(|_| format!("bad frame count in {s:?}"));
        }
        match s {
            "expert" => Ok(PolicyId::Expert),
            "random" => Ok(PolicyId::Random),
            _ => Err(format!("unknown policy id {s:?}")),
        }
    }
}

/// A demonstrator to roll out.
pub enum DemoPolicy<'a> {
    Expert,
    Random,
    /// Samples from a learner's policy head.
    Checkpoint { model: &'a Model, frames: u64 },
}

impl DemoPolicy<'_> {
    fn id(&self) -> PolicyId {
        match self {
            DemoPolicy::Expert => PolicyId::Expert,
            DemoPolicy::Random => PolicyId::Random,
            DemoPolicy::Checkpoint { frames, .. } => PolicyId::Agent(*frames),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    /// `s_1 .. s_T`; `observations[t].step_index == t`.
    pub observations: Vec<Observation>,
    /// `a_1 .. a_{T-1}` when labeled.
    pub actions: Option<Vec<Action>>,
    pub outcome: Outcome,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn win(&self) -> bool {
        self.outcome == Outcome::Win
    }

    /// Undiscounted environment return implied by the outcome and length.
    pub fn episode_return(&self, step_penalty: f64) -> f64 {
        let steps = self.len().saturating_sub(1) as f64;
        match self.outcome {
            Outcome::Win => 1.0 - step_penalty * (steps - 1.0),
            Outcome::Loss => -1.0 - step_penalty * (steps - 1.0),
            Outcome::Timeout => -step_penalty * steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoHeader {
    pub version: u32,
    pub env_hash: u64,
    pub vocab_hash: u64,
    pub policy: PolicyId,
    pub labeled: bool,
    pub pseudo_labeled: bool,
    pub language: LanguageChannels,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub wins: usize,
}

impl DemoHeader {
    pub fn win_rate(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.wins as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoStore {
    pub header: DemoHeader,
    pub trajectories: Vec<Trajectory>,
}

/// Seed of the `i`-th episode of a collection with base seed `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    mix_seed(seed, i as u64) & 0xffff_ffff
}

/// Rolls out `n` episodes of `policy`. The language channels are those of
/// `world`'s configuration.
pub fn collect_demos(
    world: &GridWorld,
    policy: DemoPolicy<'_>,
    n: usize,
    seed: u64,
    strip_actions: bool,
) -> Result<DemoStore, DemoError> {
    if n == 0 {
        return Err(DemoError::Invalid("n must be at least 1".into()));
    }
    if let DemoPolicy::Checkpoint { model, .. } = &policy {
        let v = world.vocab();
        if model.config.n_tokens != v.n_tokens() || model.config.n_symbols != v.n_symbols() {
            return Err(DemoError::Invalid(format!(
                "checkpoint vocabulary ({} tokens, {} symbols) does not match environment ({} tokens, {} symbols)",
                model.config.n_tokens,
                model.config.n_symbols,
                v.n_tokens(),
                v.n_symbols()
            )));
        }
    }
    let cfg = world.config();
    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let ep_seed = episode_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(ep_seed, 0xac7));
        let (mut ep, obs) = world.reset(ep_seed)?;
        let mut observations = vec![obs];
        let mut actions = Vec::new();
        while !ep.is_done() {
            let action = match &policy {
                DemoPolicy::Expert => expert_action(&ep),
                DemoPolicy::Random => Action::ALL[rng.gen_range(0..N_ACTIONS)],
                DemoPolicy::Checkpoint { model, .. } => {
                    let last = observations.last().expect("non-empty");
                    let probs = action_probs(&model.config, &model.params, &[last])?;
                    Action::ALL[sample_index(&probs[0], &mut rng)]
                }
            };
            let r = ep.step(action)?;
            actions.push(action);
            observations.push(r.observation);
        }
        trajectories.push(Trajectory {
            seed: ep_seed,
            observations,
            actions: (!strip_actions).then_some(actions),
            outcome: ep.outcome().expect("finished episode has an outcome"),
        });
    }
    let wins = trajectories.iter().filter(|t| t.win()).count();
    Ok(DemoStore {
        header: DemoHeader {
            version: DEMO_VERSION,
            env_hash: cfg.hash(),
            vocab_hash: world.vocab().hash(),
            policy: policy.id(),
            labeled: !strip_actions,
            pseudo_labeled: false,
            language: cfg.language,
            height: cfg.height,
            width: cfg.width,
            count: n,
            wins,
        },
        trajectories,
    })
}

/// Draws an index from a probability row.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tokens(&mut self, t: &[u16]) -> Result<(), DemoError> {
        let len = u16::try_from(t.len()).map_err(|_| DemoError::Invalid("token sequence too long".into()))?;
        self.u16(len);
        for &x in t {
            self.u16(x);
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DemoError> {
        let end = self.pos.checked_add(n).ok_or(DemoError::Truncated)?;
        if end > self.buf.len() {
            return Err(DemoError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DemoError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DemoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, DemoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, DemoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tokens(&mut self) -> Result<Vec<u16>, DemoError> {
        let n = self.u16()? as usize;
        (0..n).map(|_| self.u16()).collect()
    }
}

const FLAG_LABELED: u8 = 1;
const FLAG_PSEUDO: u8 = 2;

fn outcome_code(o: Outcome) -> u8 {
    match o {
        Outcome::Win => 0,
        Outcome::Loss => 1,
        Outcome::Timeout => 2,
    }
}

fn outcome_from(code: u8) -> Result<Outcome, DemoError> {
    match code {
        0 => Ok(Outcome::Win),
        1 => Ok(Outcome::Loss),
        2 => Ok(Outcome::Timeout),
        _ => Err(DemoError::Format(format!("outcome code {code}"))),
    }
}

impl DemoStore {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Every `(trajectory, t)` with a successor frame.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        self.trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, tr)| (0..tr.len().saturating_sub(1)).map(move |t| (i, t)))
            .collect()
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len().saturating_sub(1)).sum()
    }

    pub fn mean_return(&self, step_penalty: f64) -> f64 {
        let total: f64 = self.trajectories.iter().map(|t| t.episode_return(step_penalty)).sum();
        total / self.len().max(1) as f64
    }

    fn encode_records(&self) -> Result<Vec<u8>, DemoError> {
        let mut w = Writer(Vec::new());
        let cells = self.header.height * self.header.width;
        for tr in &self.trajectories {
            let seed = u32::try_from(tr.seed).map_err(|_| DemoError::Invalid("episode seed exceeds u32".into()))?;
            let t_len = u16::try_from(tr.len()).map_err(|_| DemoError::Invalid("trajectory too long".into()))?;
            if tr.actions.is_some() != self.header.labeled {
                return Err(DemoError::Invalid("labeled flag inconsistent across records".into()));
            }
            w.u32(seed);
            w.u16(t_len);
            let mut flags = outcome_code(tr.outcome) << 4;
            if tr.actions.is_some() {
                flags |= FLAG_LABELED;
            }
            if self.header.pseudo_labeled {
                flags |= FLAG_PSEUDO;
            }
            w.u8(flags);
            // the manual is invariant within an episode and stored once
            let manual = tr.observations.first().map(|o| o.manual.clone()).unwrap_or_default();
            w.u16(manual.lines.len() as u16);
            for line in &manual.lines {
                w.tokens(line)?;
            }
            for (t, o) in tr.observations.iter().enumerate() {
                if o.grid.len() != cells || o.step_index as usize != t || o.manual != manual {
                    return Err(DemoError::Invalid(format!("frame {t} is inconsistent with its trajectory")));
                }
                w.0.extend_from_slice(&o.grid);
                w.tokens(&o.message)?;
                if let Some(actions) = &tr.actions {
                    if t + 1 < tr.len() {
                        w.u8(actions[t].index() as u8);
                    }
                }
            }
        }
        Ok(w.0)
    }

    fn encode_header(&self, checksum: u64) -> Vec<u8> {
        let h = &self.header;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(DEMO_MAGIC);
        w.u32(h.version);
        w.u64(h.env_hash);
        w.u64(h.vocab_hash);
        let pid = h.policy.to_string();
        w.u16(pid.len() as u16);
        w.0.extend_from_slice(pid.as_bytes());
        let mut flags = 0;
        if h.labeled {
            flags |= FLAG_LABELED;
        }
        if h.pseudo_labeled {
            flags |= FLAG_PSEUDO;
        }
        w.u8(flags);
        w.u8(h.language.bits());
        w.u8(h.height as u8);
        w.u8(h.width as u8);
        w.u32(h.count as u32);
        w.u32(h.wins as u32);
        w.u64(checksum);
        w.0
    }

    /// Serialized bytes; the checksum covers the header fields before it
    /// and every record.
    pub fn to_bytes(&self) -> Result<Vec<u8>, DemoError> {
        if self.header.count != self.trajectories.len() {
            return Err(DemoError::Invalid("header count disagrees with records".into()));
        }
        let records = self.encode_records()?;
        let mut head = self.encode_header(0);
        head.truncate(head.len() - 8);
        let mut h = Fnv1a::default();
        h.update(&head);
        h.update(&records);
        let mut out = self.encode_header(h.finish());
        out.extend_from_slice(&records);
        Ok(out)
    }

    /// Parses and verifies a store. The vocabulary hash must match `vocab`.
    pub fn from_bytes(bytes: &[u8], vocab: &Vocab) -> Result<Self, DemoError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).map_err(|_| DemoError::BadMagic)? != DEMO_MAGIC {
            return Err(DemoError::BadMagic);
        }
        let version = r.u32()?;
        if version != DEMO_VERSION {
            return Err(DemoError::Version(version));
        }
        let env_hash = r.u64()?;
        let vocab_hash = r.u64()?;
        let pid_len = r.u16()? as usize;
        let pid = std::str::from_utf8(r.take(pid_len)?).map_err(|_| DemoError::Format("policy id not utf-8".into()))?;
        let policy: PolicyId = pid.parse().map_err(DemoError::Format)?;
        let flags = r.u8()?;
        let language = LanguageChannels::from_bits(r.u8()?);
        let height = r.u8()? as usize;
        let width = r.u8()? as usize;
        let count = r.u32()? as usize;
        let wins = r.u32()? as usize;
        let checksum_at = r.pos;
        let expected = r.u64()?;
        let mut h = Fnv1a::default();
        h.update(&bytes[..checksum_at]);
        h.update(&bytes[r.pos..]);
        let actual = h.finish();
        if actual != expected {
            return Err(DemoError::Checksum { expected, actual });
        }
        if vocab_hash != vocab.hash() {
            return Err(DemoError::VocabHash {
                store: vocab_hash,
                vocab: vocab.hash(),
            });
        }
        let labeled = flags & FLAG_LABELED != 0;
        let pseudo_labeled = flags & FLAG_PSEUDO != 0;
        let cells = height * width;
        let mut trajectories = Vec::with_capacity(count);
        for _ in 0..count {
            let seed = r.u32()? as u64;
            let t_len = r.u16()? as usize;
            let rflags = r.u8()?;
            if (rflags & FLAG_LABELED != 0) != labeled {
                return Err(DemoError::Format("record labeled flag disagrees with header".into()));
            }
            let outcome = outcome_from(rflags >> 4)?;
            let n_lines = r.u16()? as usize;
            let lines = (0..n_lines).map(|_| r.tokens()).collect::<Result<Vec<_>, _>>()?;
            let manual = Arc::new(Manual { lines });
            let mut observations = Vec::with_capacity(t_len);
            let mut actions = labeled.then(Vec::new);
            for t in 0..t_len {
                let grid = r.take(cells)?.to_vec();
                let message = r.tokens()?;
                observations.push(Observation {
                    height,
                    width,
                    grid,
                    manual: manual.clone(),
                    message,
                    step_index: t as u32,
                });
                if let Some(a) = actions.as_mut() {
                    if t + 1 < t_len {
                        let code = r.u8()? as usize;
                        a.push(Action::from_index(code).ok_or_else(|| DemoError::Format(format!("action code {code}")))?);
                    }
                }
            }
            trajectories.push(Trajectory {
                seed,
                observations,
                actions,
                outcome,
            });
        }
        if r.pos != bytes.len() {
            return Err(DemoError::Format("trailing bytes".into()));
        }
        Ok(DemoStore {
            header: DemoHeader {
                version,
                env_hash,
                vocab_hash,
                policy,
                labeled,
                pseudo_labeled,
                language,
                height,
                width,
                count,
                wins,
            },
            trajectories,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DemoError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| DemoError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self, DemoError> {
        let bytes = std::fs::read(path).map_err(|e| DemoError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, vocab)
    }

    /// Errors unless the store was produced by `world`'s configuration.
    pub fn check_env(&self, world: &GridWorld) -> Result<(), DemoError> {
        let env = world.config().hash();
        if env != self.header.env_hash {
            return Err(DemoError::EnvHash {
                store: self.header.env_hash,
                env,
            });
        }
        Ok(())
    }

    /// Replays every labeled trajectory and compares each frame.
    pub fn verify_replay(&self, world: &GridWorld) -> Result<(), DemoError> {
        self.check_env(world)?;
        if !self.header.labeled {
            return Err(DemoError::Invalid("replay needs a labeled store".into()));
        }
        for (index, tr) in self.trajectories.iter().enumerate() {
            let (mut ep, first) = world.reset(tr.seed)?;
            if tr.observations.first() != Some(&first) {
                return Err(DemoError::Replay { index, step: 0 });
            }
            for (t, &a) in tr.actions.as_ref().expect("labeled").iter().enumerate() {
                let r = ep.step(a)?;
                if r.observation != tr.observations[t + 1] {
                    return Err(DemoError::Replay { index, step: t + 1 });
                }
            }
        }
        Ok(())
    }

    fn with_trajectories(&self, trajectories: Vec<Trajectory>) -> DemoStore {
        let mut header = self.header.clone();
        header.count = trajectories.len();
        header.wins = trajectories.iter().filter(|t| t.win()).count();
        DemoStore { header, trajectories }
    }

    /// Copy without actions.
    pub fn stripped(&self) -> DemoStore {
        let mut out = self.with_trajectories(
            self.trajectories
                .iter()
                .map(|t| Trajectory {
                    actions: None,
                    ..t.clone()
                })
                .collect(),
        );
        out.header.labeled = false;
        out.header.pseudo_labeled = false;
        out
    }

    /// Copy with the given per-trajectory actions inserted and the
    /// pseudo-labeled flag set.
    pub fn with_pseudo_labels(&self, labels: Vec<Vec<Action>>) -> Result<DemoStore, DemoError> {
        if labels.len() != self.len() {
            return Err(DemoError::Invalid("one label sequence per trajectory required".into()));
        }
        let mut trajectories = Vec::with_capacity(self.len());
        for (tr, a) in self.trajectories.iter().zip(labels) {
            if a.len() + 1 != tr.len() {
                return Err(DemoError::Invalid("label sequence length must be T-1".into()));
            }
            trajectories.push(Trajectory {
                actions: Some(a),
                ..tr.clone()
            });
        }
        let mut out = self.with_trajectories(trajectories);
        out.header.labeled = true;
        out.header.pseudo_labeled = true;
        if !matches!(out.header.policy, PolicyId::Pseudo(_)) {
            out.header.policy = PolicyId::Pseudo(Box::new(self.header.policy.clone()));
        }
        Ok(out)
    }
}

/// Seeded partition at trajectory granularity into `(train, heldout)`, with
/// `round(n * fraction)` trajectories held out. Both parts keep the
/// original record order.
pub fn split_holdout(store: &DemoStore, fraction: f64, seed: u64) -> Result<(DemoStore, DemoStore), DemoError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DemoError::Invalid(format!("fraction {fraction} outside (0,1)")));
    }
    let n = store.len();
    let held = (n as f64 * fraction).round() as usize;
    if n < 2 || held == 0 || held == n {
        return Err(DemoError::Invalid(format!(
            "holding out {fraction} of {n} trajectories leaves a side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_held = vec![false; n];
    for &i in &idx[..held] {
        is_held[i] = true;
    }
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, tr) in store.trajectories.iter().enumerate() {
        if is_held[i] {
            heldout.push(tr.clone());
        } else {
            train.push(tr.clone());
        }
    }
    Ok((store.with_trajectories(train), store.with_trajectories(heldout)))
}

#[cfg(test)]
mod tests;
