use rand::{Rng, SeedableRng};

use super::*;
use crate::demos::{collect_demos, DemoPolicy};
use crate::env::{generate_split, EpisodeConfig, GridWorld, SplitSide};

fn world() -> GridWorld {
    let split = generate_split(4, 0.25, 0).unwrap();
    GridWorld::new(EpisodeConfig::new(split, SplitSide::Train)).unwrap()
}

fn cfg(w: &GridWorld) -> ModelConfig {
    ModelConfig::for_env(w.config(), w.vocab())
}

#[test]
fn zero_head_loss_is_ln_symbols() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Expert, 3, 1, true).unwrap();
    let model = Model::init(cfg(&w), 0).unwrap();
    let tr = &store.trajectories[0];
    let pairs = vec![(&tr.observations[0], &tr.observations[1])];
    let mut g = model.graph();
    let l = dynamics_loss(&model.config, &mut g, &pairs).unwrap();
    assert!((g.scalar_value(l) - (model.config.n_symbols as f64).ln()).abs() < 1e-12);
}

#[test]
fn repeated_pairs_match_single_pair_loss() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Expert, 2, 2, true).unwrap();
    let mut model = Model::init(cfg(&w), 0).unwrap();
    let id = model.params.id("dyn.w").unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for v in model.params.get_mut(id).data_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    let tr = &store.trajectories[0];
    let p = (&tr.observations[0], &tr.observations[1]);
    let mut g = model.graph();
    let one = dynamics_loss(&model.config, &mut g, &[p]).unwrap();
    let many = dynamics_loss(&model.config, &mut g, &[p, p, p]).unwrap();
    assert!((g.scalar_value(one) - g.scalar_value(many)).abs() < 1e-12);
}

#[test]
fn non_consecutive_pairs_are_rejected() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Random, 1, 2, true).unwrap();
    let model = Model::init(cfg(&w), 0).unwrap();
    let tr = &store.trajectories[0];
    let mut g = model.graph();
    let e = dynamics_loss(&model.config, &mut g, &[(&tr.observations[0], &tr.observations[2])]).unwrap_err();
    assert!(matches!(e, PretrainError::NotConsecutive(0)));
    assert!(matches!(dynamics_loss(&model.config, &mut g, &[]), Err(PretrainError::Empty)));
}

#[test]
fn confident_correct_predictor_has_vanishing_loss() {
    let mut g = Graph::new();
    let mut logits = vec![0.0; 3 * 4];
    let targets = [2usize, 0, 3];
    for (r, &t) in targets.iter().enumerate() {
        logits[r * 4 + t] = 60.0;
    }
    let x = g.constant(Tensor::new(vec![3, 4], logits).unwrap());
    let l = g.cross_entropy(x, &targets).unwrap();
    assert!(g.scalar_value(l) < 1e-20);
}

#[test]
fn accuracy_oracles() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Random, 40, 6, true).unwrap();
    let truth = |cur: &[&Observation]| -> Result<Vec<usize>, PretrainError> {
        // look the successor up by identity within the store
        let mut out = Vec::new();
        for o in cur {
            let tr = store
                .trajectories
                .iter()
                .find(|t| std::ptr::eq(t.observations[0].manual.as_ref(), o.manual.as_ref()))
                .unwrap();
            out.extend(tr.observations[o.step_index as usize + 1].grid.iter().map(|&s| s as usize));
        }
        Ok(out)
    };
    assert_eq!(frame_accuracy_with(&store, truth).unwrap(), 1.0);

    // identity prediction equals counted cell stability
    let (mut same, mut total) = (0usize, 0usize);
    for (i, t) in store.transitions() {
        let tr = &store.trajectories[i];
        for (a, b) in tr.observations[t].grid.iter().zip(&tr.observations[t + 1].grid) {
            same += (a == b) as usize;
            total += 1;
        }
    }
    let identity = frame_accuracy_with(&store, |cur| Ok(cur.iter().flat_map(|o| o.grid.iter().map(|&s| s as usize)).collect())).unwrap();
    assert_eq!(identity, same as f64 / total as f64);

    // uniform random guesses land within 3 sigma of 1/n
    let n = w.vocab().n_symbols();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let acc = frame_accuracy_with(&store, |cur| Ok((0..cur.len() * 64).map(|_| rng.gen_range(0..n)).collect())).unwrap();
    let p = 1.0 / n as f64;
    let sigma = (p * (1.0 - p) / total as f64).sqrt();
    assert!((acc - p).abs() < 3.0 * sigma, "{acc} vs {p}");
}

#[test]
fn accuracy_is_invariant_to_batching() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Random, 10, 3, true).unwrap();
    let mut model = Model::init(cfg(&w), 1).unwrap();
    let id = model.params.id("dyn.w").unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for v in model.params.get_mut(id).data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let batched = eval_frame_accuracy(&model.config, &model.params, &store).unwrap();
    let mut hits = 0.0;
    let mut total = 0.0;
    for tr in &store.trajectories {
        let mut single = store.clone();
        single.trajectories = vec![tr.clone()];
        let n = (tr.len() - 1) as f64 * 64.0;
        hits += eval_frame_accuracy(&model.config, &model.params, &single).unwrap() * n;
        total += n;
    }
    assert!((batched - hits / total).abs() < 1e-12);
}

fn small_config(seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs: 3,
        seed,
        ..PretrainConfig::default()
    }
}

#[test]
fn pretraining_beats_majority_and_keeps_heads_zero() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Expert, 200, 21, true).unwrap();
    let (model, teacher, report) = pretrain_dynamics(&store, cfg(&w), &small_config(0)).unwrap();
    assert!(report.best_heldout_acc >= report.majority_baseline, "{report:?}");
    assert!(model.params.by_name("pi.w").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(model.params.by_name("v.w").unwrap().data().iter().all(|&v| v == 0.0));
    let best = report.epochs.iter().map(|e| e.heldout_acc).fold(0.0, f64::max);
    assert_eq!(best, report.best_heldout_acc);
    assert_eq!(teacher.meta("pretrain.epoch"), Some(report.best_epoch.to_string().as_str()));
    let (_, held) = split_holdout(&store, 0.1, mix_seed(0, 1)).unwrap();
    let acc = eval_frame_accuracy(&teacher.config().clone(), teacher.params(), &held).unwrap();
    assert_eq!(acc, report.best_heldout_acc);
    let csv = report.to_csv();
    assert!(csv.starts_with("epoch,train_loss,heldout_acc\n"));
    assert_eq!(csv.lines().count(), report.epochs.len() + 1);
}

#[test]
fn first_epoch_lowers_the_loss() {
    let w = world();
    let mut decreased = 0;
    for seed in 0..20 {
        let store = collect_demos(&w, DemoPolicy::Expert, 60, 100 + seed, true).unwrap();
        let config = PretrainConfig {
            epochs: 1,
            seed,
            ..PretrainConfig::default()
        };
        let (_, _, report) = pretrain_dynamics(&store, cfg(&w), &config).unwrap();
        if report.epochs[0].train_loss < report.initial_loss {
            decreased += 1;
        }
    }
    assert!(decreased >= 19, "{decreased}/20");
}

#[test]
fn empty_store_is_rejected() {
    let w = world();
    let mut store = collect_demos(&w, DemoPolicy::Expert, 2, 1, true).unwrap();
    store.trajectories.clear();
    store.header.count = 0;
    assert!(matches!(pretrain_dynamics(&store, cfg(&w), &small_config(0)), Err(PretrainError::Empty)));
    assert!(matches!(vae_pretrain(&store, cfg(&w), &VaeConfig::default()), Err(PretrainError::Empty)));
}

#[test]
fn kl_closed_forms() {
    let mut g = Graph::new();
    let mu = g.constant(Tensor::zeros(&[2, 3]));
    let lv = g.constant(Tensor::zeros(&[2, 3]));
    let kl = kl_standard_normal(&mut g, mu, lv).unwrap();
    assert_eq!(g.scalar_value(kl), 0.0);

    let mu = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let lv = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    let kl = kl_standard_normal(&mut g, mu, lv).unwrap();
    assert!((g.scalar_value(kl) - 0.5).abs() < 1e-15);
}

#[test]
fn vae_uniform_decoder_reconstruction_is_ln_symbols_per_cell() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Expert, 2, 1, true).unwrap();
    let c = cfg(&w);
    let mut model = Model::init(c, 0).unwrap();
    let r = c.rep_dim;
    let hw_s = c.cells() * c.n_symbols;
    model.params.insert("aux.vae.logvar.w", Tensor::zeros(&[r, r]));
    model.params.insert("aux.vae.logvar.b", Tensor::zeros(&[r]));
    model.params.insert("aux.vae.dec.w", Tensor::zeros(&[r, hw_s]));
    model.params.insert("aux.vae.dec.b", Tensor::zeros(&[hw_s]));
    let obs = vec![&store.trajectories[0].observations[0]];
    let mut g = model.graph();
    // beta 0 isolates the reconstruction term
    let l = vae_loss(&c, &mut g, &obs, Tensor::zeros(&[1, r]), 0.0).unwrap();
    let per_cell = g.scalar_value(l) / c.cells() as f64;
    assert!((per_cell - (c.n_symbols as f64).ln()).abs() < 1e-12);
}

#[test]
fn vae_pretraining_returns_rep_only() {
    let w = world();
    let store = collect_demos(&w, DemoPolicy::Expert, 20, 3, true).unwrap();
    let config = VaeConfig {
        epochs: 1,
        ..VaeConfig::default()
    };
    let model = vae_pretrain(&store, cfg(&w), &config).unwrap();
    assert!(!model.params.contains("aux.vae.dec.w"));
    assert!(model.params.by_name("pi.w").unwrap().data().iter().all(|&v| v == 0.0));
    let fresh = Model::init(cfg(&w), mix_seed(0, 2)).unwrap();
    assert_ne!(model.params.by_name("rep.l1.w"), fresh.params.by_name("rep.l1.w"));
}
