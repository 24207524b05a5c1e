//! Language-grounded gridworld.
//!
//! An 8x8 board holds the agent and three entities. Each episode binds
//! entity classes to roles (goal / avoid / neutral) and movement patterns,
//! and that binding is only communicated through a shuffled text manual
//! whose lines name entities by synonym. The generalization split holds out
//! whole `(goal, avoid)` class pairs, so the eval side can only be solved by
//! reading the manual.

mod expert;
mod split;
mod vocab;
mod world;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expert::expert_action;
pub use split::{generate_split, RolePair, SplitSide, SplitSpec};
pub use vocab::{
    registry, EntityClass, Vocab, MAX_CLASSES, SYM_AGENT, SYM_BACKGROUND, SYM_ENTITY_BASE,
    VOCAB_VERSION,
};
pub use world::{Entity, Episode, Event, Pos};

use crate::hash::fnv1a64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("no solvable placement after {0} draws")]
    Unsolvable(usize),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("io error: {0}")]
    Io(String),
}

pub const N_ACTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    /// Fixed action order; also the tie-breaking order everywhere.
    pub const ALL: [Action; N_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    /// `(row, col)` displacement.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Goal,
    Avoid,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Movement {
    Static,
    Chase,
    Flee,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Win,
    Loss,
    Timeout,
}

/// Which text channels reach the observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LanguageChannels {
    pub manual: bool,
    pub message: bool,
}

impl Default for LanguageChannels {
    fn default() -> Self {
        Self {
            manual: true,
            message: true,
        }
    }
}

impl LanguageChannels {
    pub fn bits(self) -> u8 {
        (self.manual as u8) | ((self.message as u8) << 1)
    }

    pub fn from_bits(b: u8) -> Self {
        Self {
            manual: b & 1 != 0,
            message: b & 2 != 0,
        }
    }
}

/// Roles and movement patterns for the three entities of one episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub goal: u8,
    pub avoid: u8,
    pub neutral: u8,
    pub goal_movement: Movement,
    pub avoid_movement: Movement,
    pub neutral_movement: Movement,
}

impl RoleAssignment {
    pub fn pair(&self) -> RolePair {
        (self.goal, self.avoid)
    }
}

/// Shuffled manual lines, one per active entity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Manual {
    pub lines: Vec<Vec<u16>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    /// Row-major symbol ids.
    pub grid: Vec<u8>,
    pub manual: Arc<Manual>,
    pub message: Vec<u16>,
    pub step_index: u32,
}

impl Observation {
    pub fn cell(&self, row: usize, col: usize) -> u8 {
        self.grid[row * self.width + col]
    }

    pub fn agent_pos(&self) -> Option<(usize, usize)> {
        self.grid
            .iter()
            .position(|&s| s == SYM_AGENT)
            .map(|i| (i / self.width, i % self.width))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub win: bool,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub height: usize,
    pub width: usize,
    pub max_steps: u32,
    pub step_penalty: f64,
    pub gamma: f64,
    pub split: SplitSpec,
    pub side: SplitSide,
    pub language: LanguageChannels,
}

impl EpisodeConfig {
    /// 8x8 board, 64-step cap, 0.01 step penalty, gamma 0.99.
    pub fn new(split: SplitSpec, side: SplitSide) -> Self {
        Self {
            height: 8,
            width: 8,
            max_steps: 64,
            step_penalty: 0.01,
            gamma: 0.99,
            split,
            side,
            language: LanguageChannels::default(),
        }
    }

    pub fn with_side(&self, side: SplitSide) -> Self {
        Self {
            side,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.height < 3 || self.width < 3 || self.height > 255 || self.width > 255 {
            return Err(EnvError::Config(format!(
                "grid {}x{} out of range",
                self.height, self.width
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(EnvError::Config(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        let min_steps = 2 * (self.height + self.width) as u32;
        if self.max_steps < min_steps {
            return Err(EnvError::Config(format!(
                "max_steps {} below 2*(H+W) = {min_steps}",
                self.max_steps
            )));
        }
        if !(self.step_penalty.is_finite() && self.step_penalty >= 0.0) {
            return Err(EnvError::Config("step_penalty must be finite and >= 0".into()));
        }
        if self.split.n_classes < 3 {
            return Err(EnvError::Config(
                "episodes need at least 3 entity classes".into(),
            ));
        }
        if self.split.train.is_empty() || self.split.eval.is_empty() {
            return Err(EnvError::Config("split side empty".into()));
        }
        Ok(())
    }

    /// Canonical text form, hashed into demo store headers and manifests.
    pub fn canonical(&self) -> String {
        format!(
            "h={};w={};max_steps={};step_penalty={:?};gamma={:?};n_classes={};split_seed={};train={:?};eval={:?};side={};manual={};message={}",
            self.height,
            self.width,
            self.max_steps,
            self.step_penalty,
            self.gamma,
            self.split.n_classes,
            self.split.seed,
            self.split.train,
            self.split.eval,
            self.side.as_str(),
            self.language.manual,
            self.language.message
        )
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }
}

/// An environment: configuration plus precomputed template token ids.
#[derive(Debug, Clone)]
pub struct GridWorld {
    shared: Arc<world::Shared>,
}

impl GridWorld {
    pub fn new(config: EpisodeConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let vocab = Vocab::new(config.split.n_classes)?;
        Ok(Self {
            shared: Arc::new(world::Shared::new(config, vocab)),
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.shared.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.shared.vocab
    }

    pub fn reset(&self, seed: u64) -> Result<(Episode, Observation), EnvError> {
        world::reset(&self.shared, seed)
    }

    /// Same environment viewed from another split side.
    pub fn with_side(&self, side: SplitSide) -> Result<Self, EnvError> {
        Self::new(self.config().with_side(side))
    }
}

/// Template tokens for an event; empty when the message channel is off.
pub fn render_message(episode: &Episode, event: Option<&Event>) -> Vec<u16> {
    world::render_message(episode, event)
}

#[cfg(test)]
mod tests;
