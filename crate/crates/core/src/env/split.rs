use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::EnvError;

/// Ordered `(goal class, avoid class)` pair; the role binding an episode is
/// drawn from.
pub type RolePair = (u8, u8);

/// Disjoint train/eval partition of all ordered role pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_classes: usize,
    pub train: Vec<RolePair>,
    pub eval: Vec<RolePair>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitSide {
    Train,
    Eval,
}

impl SplitSide {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitSide::Train => "train",
            SplitSide::Eval => "eval",
        }
    }
}

impl std::str::FromStr for SplitSide {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitSide::Train),
            "eval" => Ok(SplitSide::Eval),
            other => Err(EnvError::Config(format!("unknown split side {other:?}"))),
        }
    }
}

impl SplitSpec {
    pub fn pairs(&self, side: SplitSide) -> &[RolePair] {
        match side {
            SplitSide::Train => &self.train,
            SplitSide::Eval => &self.eval,
        }
    }
}

/// Enumerates every ordered `(goal, avoid)` pair of distinct classes and
/// partitions them with a seeded shuffle; `floor(total * holdout)` pairs go
/// to the eval side.
pub fn generate_split(n_classes: usize, holdout_fraction: f64, seed: u64) -> Result<SplitSpec, EnvError> {
    if n_classes < 2 || n_classes > super::vocab::MAX_CLASSES {
        return Err(EnvError::Config(format!(
            "n_classes must be in 2..={}, got {n_classes}",
            super::vocab::MAX_CLASSES
        )));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(EnvError::Config(format!(
            "holdout_fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let mut pairs: Vec<RolePair> = Vec::with_capacity(n_classes * (n_classes - 1));
    for g in 0..n_classes as u8 {
        for a in 0..n_classes as u8 {
            if g != a {
                pairs.push((g, a));
            }
        }
    }
    let total = pairs.len();
    let n_eval = (total as f64 * holdout_fraction).floor() as usize;
    if n_eval == 0 || n_eval >= total {
        return Err(EnvError::Config(format!(
            "holdout {holdout_fraction} of {total} pairs leaves a side empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let mut eval = pairs.split_off(total - n_eval);
    let mut train = pairs;
    train.sort_unstable();
    eval.sort_unstable();
    Ok(SplitSpec {
        n_classes,
        train,
        eval,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_classes_quarter_holdout() {
        let s = generate_split(4, 0.25, 0).unwrap();
        assert_eq!(s.train.len() + s.eval.len(), 12);
        assert_eq!((s.train.len(), s.eval.len()), (9, 3));
    }

    #[test]
    fn two_classes_half_holdout() {
        let s = generate_split(2, 0.5, 7).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (1, 1));
    }

    #[test]
    fn degenerate_holdout_rejected() {
        assert!(generate_split(2, 0.2, 0).is_err());
        assert!(generate_split(4, 0.0, 0).is_err());
        assert!(generate_split(4, 1.0, 0).is_err());
        assert!(generate_split(1, 0.5, 0).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(generate_split(5, 0.25, 3).unwrap(), generate_split(5, 0.25, 3).unwrap());
    }

    proptest! {
        #[test]
        fn sides_disjoint_and_exhaustive(n in 2usize..=8, frac in 0.05f64..0.95, seed in any::<u64>()) {
            if let Ok(s) = generate_split(n, frac, seed) {
                prop_assert!(!s.train.is_empty() && !s.eval.is_empty());
                for p in &s.eval {
                    prop_assert!(!s.train.contains(p));
                }
                prop_assert_eq!(s.train.len() + s.eval.len(), n * (n - 1));
            }
        }
    }
}
