//! Configuration, experiment matrix orchestration, manifests, plots and
//! the gradient oracle suite.

pub mod config;
pub mod matrix;
pub mod oracle;
pub mod plot;

pub use config::{ConfigError, DemoSource, ExperimentConfig, Language};
pub use matrix::{Cell, CellResult, ExperimentMatrix, MatrixRunner, RunManifest, RunStatus};

use crate::demos::DemoError;
use crate::env::EnvError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::pretrain::PretrainError;
use crate::rl::RlError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("io: {0}")]
    Io(String),
    #[error("json: {0}")]
    Json(String),
    #[error("csv: {0}")]
    Csv(String),
}

impl HarnessError {
    /// Validation failures as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        match self {
            HarnessError::Config(_) => true,
            HarnessError::Rl(RlError::Config(_) | RlError::Missing(_) | RlError::VocabHash { .. } | RlError::Unlabeled) => true,
            HarnessError::Env(EnvError::Config(_)) => true,
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests;
