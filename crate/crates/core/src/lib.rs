//! Language dynamics distillation at desk scale.
//!
//! A dynamics model is pretrained on unlabeled demonstrations of a
//! language-grounded gridworld, then used to initialize and regularize an
//! advantage actor-critic learner through representation distillation.

pub mod demos;
pub mod env;
pub mod harness;
pub mod hash;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod rl;
