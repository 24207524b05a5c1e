use std::collections::HashSet;

use super::*;
use crate::env::{generate_split, EpisodeConfig, SplitSide};

fn world_with(language: LanguageChannels) -> GridWorld {
    let split = generate_split(4, 0.25, 0).unwrap();
    let mut cfg = EpisodeConfig::new(split, SplitSide::Train);
    cfg.language = language;
    GridWorld::new(cfg).unwrap()
}

fn world() -> GridWorld {
    world_with(LanguageChannels::default())
}

#[test]
fn expert_store_is_unlabeled_and_wins() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Expert, 1000, 11, true).unwrap();
    assert!(!store.header.labeled);
    assert_eq!(store.header.count, 1000);
    assert!(store.header.win_rate() >= 0.99, "{}", store.header.win_rate());
    assert!(store.trajectories.iter().all(|t| t.actions.is_none()));

    let random = collect_demos(&w, DemoPolicy::Random, 1000, 11, true).unwrap();
    let pen = w.config().step_penalty;
    assert!(random.mean_return(pen) < store.mean_return(pen));
    assert_eq!(store.header.policy.to_string(), "expert");
}

#[test]
fn labeled_store_round_trips_and_replays() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Random, 20, 5, false).unwrap();
    for tr in &store.trajectories {
        assert_eq!(tr.actions.as_ref().unwrap().len(), tr.len() - 1);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.lddm");
    store.save(&path).unwrap();
    let loaded = DemoStore::load(&path, w.vocab()).unwrap();
    assert_eq!(loaded, store);
    loaded.verify_replay(&w).unwrap();
}

#[test]
fn unlabeled_bytes_carry_no_action_field() {
    let w = world();
    let labeled = collect_demos(&w, DemoPolicy::Random, 10, 2, false).unwrap();
    let unlabeled = labeled.stripped();
    let a = labeled.to_bytes().unwrap();
    let b = unlabeled.to_bytes().unwrap();
    assert_eq!(a.len() - b.len(), labeled.n_transitions());
}

#[test]
fn tampered_replay_is_detected() {
    let w = world();
    let mut store = collect_demos(&w, DemoPolicy::Random, 3, 8, false).unwrap();
    let acts = store.trajectories[1].actions.as_mut().unwrap();
    acts[0] = if acts[0] == Action::Up { Action::Down } else { Action::Up };
    assert!(matches!(store.verify_replay(&w), Err(DemoError::Replay { index: 1, .. })));
}

#[test]
fn corruption_and_mismatches_have_distinct_errors() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Expert, 5, 1, true).unwrap();
    let bytes = store.to_bytes().unwrap();

    let mut corrupt = bytes.clone();
    let last = corrupt.len() - 3;
    corrupt[last] ^= 0x40;
    let e = DemoStore::from_bytes(&corrupt, w.vocab()).unwrap_err();
    assert!(matches!(e, DemoError::Checksum { .. }), "{e}");

    let other = Vocab::new(5).unwrap();
    let e = DemoStore::from_bytes(&bytes, &other).unwrap_err();
    assert!(matches!(e, DemoError::VocabHash { .. }), "{e}");

    let mut versioned = bytes.clone();
    versioned[4] = 9;
    assert!(matches!(DemoStore::from_bytes(&versioned, w.vocab()), Err(DemoError::Version(9))));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(DemoStore::from_bytes(&magic, w.vocab()), Err(DemoError::BadMagic)));

    let e = DemoStore::from_bytes(&bytes[..20], w.vocab()).unwrap_err();
    assert!(matches!(e, DemoError::Truncated), "{e}");

    let codes: HashSet<u8> = [
        DemoError::Checksum { expected: 0, actual: 1 },
        DemoError::VocabHash { store: 0, vocab: 1 },
        DemoError::Version(9),
        DemoError::BadMagic,
        DemoError::Truncated,
    ]
    .iter()
    .map(DemoError::code)
    .collect();
    assert_eq!(codes.len(), 5);
}

#[test]
fn env_hash_is_checked() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Expert, 2, 1, false).unwrap();
    store.check_env(&w).unwrap();
    let off = world_with(LanguageChannels {
        manual: true,
        message: false,
    });
    assert!(matches!(store.check_env(&off), Err(DemoError::EnvHash { .. })));
}

#[test]
fn message_ablated_store_has_empty_messages() {
    let w = world_with(LanguageChannels {
        manual: true,
        message: false,
    });
    let store = collect_demos(&w, DemoPolicy::Random, 30, 3, true).unwrap();
    assert!(!store.header.language.message);
    assert!(store
        .trajectories
        .iter()
        .all(|t| t.observations.iter().all(|o| o.message.is_empty())));
}

#[test]
fn holdout_split_is_a_seeded_partition() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Expert, 1000, 4, true).unwrap();
    let (train, held) = split_holdout(&store, 0.1, 7).unwrap();
    assert_eq!((train.len(), held.len()), (900, 100));
    let a: HashSet<u64> = train.trajectories.iter().map(|t| t.seed).collect();
    let b: HashSet<u64> = held.trajectories.iter().map(|t| t.seed).collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(a.len() + b.len(), store.trajectories.iter().map(|t| t.seed).collect::<HashSet<_>>().len());
    let (train2, held2) = split_holdout(&store, 0.1, 7).unwrap();
    assert_eq!((train, held), (train2, held2));

    assert!(split_holdout(&store, 0.0, 1).is_err());
    let (one, _) = split_holdout(&store, 0.999, 1).unwrap();
    assert!(split_holdout(&one, 0.5, 1).is_err());
}

#[test]
fn pseudo_labels_mark_the_store() {
    let w = world();
    let labeled = collect_demos(&w, DemoPolicy::Expert, 4, 9, false).unwrap();
    let truth: Vec<Vec<Action>> = labeled.trajectories.iter().map(|t| t.actions.clone().unwrap()).collect();
    let relabeled = labeled.stripped().with_pseudo_labels(truth).unwrap();
    assert!(relabeled.header.labeled && relabeled.header.pseudo_labeled);
    assert_eq!(relabeled.header.policy.to_string(), "pseudo:expert");
    relabeled.verify_replay(&w).unwrap();
    let bytes = relabeled.to_bytes().unwrap();
    let back = DemoStore::from_bytes(&bytes, w.vocab()).unwrap();
    assert_eq!(back, relabeled);
}

#[test]
fn policy_ids_parse() {
    for s in ["expert", "random", "agent@100000", "pseudo:agent@5"] {
        assert_eq!(s.parse::<PolicyId>().unwrap().to_string(), s);
    }
    assert!("oracle".parse::<PolicyId>().is_err());
}

#[test]
fn zero_demos_is_rejected() {
    assert!(matches!(
        collect_demos(&world(), DemoPolicy::Random, 0, 0, true),
        Err(DemoError::Invalid(_))
    ));
}
