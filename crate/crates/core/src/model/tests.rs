use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::env::{generate_split, Action, GridWorld, Manual, SplitSide};
use crate::numerics::ParamId;

fn world() -> GridWorld {
    let split = generate_split(4, 0.25, 0).unwrap();
    GridWorld::new(EpisodeConfig::new(split, SplitSide::Train)).unwrap()
}

fn setup() -> (Model, Vec<Observation>) {
    let w = world();
    let cfg = ModelConfig::for_env(w.config(), w.vocab());
    let model = Model::init(cfg, 3).unwrap();
    let mut obs = Vec::new();
    for seed in 0..4 {
        let (mut ep, o) = w.reset(seed).unwrap();
        obs.push(o);
        let r = ep.step(Action::Stay).unwrap();
        obs.push(r.observation);
    }
    (model, obs)
}

fn randomize_heads(model: &mut Model, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.group(id) != ParamGroup::Rep {
            for v in model.params.get_mut(id).data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
}

fn refs(obs: &[Observation]) -> Vec<&Observation> {
    obs.iter().collect()
}

#[test]
fn every_parameter_belongs_to_one_group() {
    let (model, _) = setup();
    let mut counts = [0usize; 4];
    for (id, name, _) in model.params.iter() {
        let i = match model.params.group(id) {
            ParamGroup::Rep => 0,
            ParamGroup::Policy => 1,
            ParamGroup::Value => 2,
            ParamGroup::Dynamics => 3,
            ParamGroup::Aux => panic!("{name} has no group"),
        };
        counts[i] += 1;
    }
    assert_eq!(counts, [9, 2, 2, 3]);
}

#[test]
fn encoding_is_deterministic_and_has_width_r() {
    let (model, obs) = setup();
    let a = encode_values(&model.config, &model.params, &refs(&obs)).unwrap();
    let b = encode_values(&model.config, &model.params, &refs(&obs)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[obs.len(), 128]);
    let single = encode_values(&model.config, &model.params, &[&obs[3]]).unwrap();
    for (x, y) in single.data().iter().zip(&a.data()[3 * 128..4 * 128]) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn empty_message_pools_to_zero() {
    let (model, obs) = setup();
    let o = &obs[0];
    assert!(o.message.is_empty());
    let mut g = model.graph();
    let table = g.param("rep.token_emb").unwrap();
    let pooled = g.embedding_bag_mean(table, vec![vec![]]).unwrap();
    assert!(g.value(pooled).data().iter().all(|&v| v == 0.0));

    // the same observation with a message differs, so the channel is live
    let mut with_msg = o.clone();
    with_msg.message = o.manual.lines[0].clone();
    let a = encode_values(&model.config, &model.params, &[o]).unwrap();
    let b = encode_values(&model.config, &model.params, &[&with_msg]).unwrap();
    assert_ne!(a, b);
}

#[test]
fn manual_line_order_does_not_change_representation() {
    let (model, obs) = setup();
    for o in &obs {
        let mut permuted = o.clone();
        let mut lines = o.manual.lines.clone();
        lines.rotate_left(1);
        lines.swap(0, 1);
        permuted.manual = Arc::new(Manual { lines });
        let a = encode_values(&model.config, &model.params, &[o]).unwrap();
        let b = encode_values(&model.config, &model.params, &[&permuted]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_heads_give_uniform_policy_zero_value_and_grid_shaped_dynamics() {
    let (model, obs) = setup();
    let mut g = model.graph();
    let rep = encode(&model.config, &mut g, &refs(&obs)).unwrap();
    let logits = policy_logits(&mut g, rep).unwrap();
    let probs = g.softmax_last(logits).unwrap();
    assert!(g.value(probs).data().iter().all(|&p| p == 0.2));
    let v = value(&mut g, rep).unwrap();
    assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    assert_eq!(g.value(v).shape(), &[obs.len()]);
    let d = dynamics_logits(&model.config, &mut g, rep, &refs(&obs)).unwrap();
    assert_eq!(g.value(d).shape(), &[obs.len() * 64, model.config.n_symbols]);
    assert_eq!(model.config.n_symbols, 6);
}

#[test]
fn unknown_symbol_is_an_error() {
    let (model, obs) = setup();
    let mut bad = obs[0].clone();
    bad.grid[5] = 200;
    assert!(encode_values(&model.config, &model.params, &[&bad]).is_err());
    let mut bad = obs[0].clone();
    bad.message = vec![9999];
    assert!(encode_values(&model.config, &model.params, &[&bad]).is_err());
}

fn touched(grads: &crate::numerics::Gradients, model: &Model, group: ParamGroup) -> bool {
    model
        .params
        .ids()
        .filter(|&id| model.params.group(id) == group)
        .any(|id| grads.param(id).is_some_and(|g| g.data().iter().any(|&x| x != 0.0)))
}

#[test]
fn heads_are_separated_and_share_the_trunk() {
    let (mut model, obs) = setup();
    randomize_heads(&mut model, 9);
    let batch = refs(&obs);
    let targets: Vec<usize> = (0..obs.len()).map(|i| i % 5).collect();

    let mut g = model.graph();
    let rep = encode(&model.config, &mut g, &batch).unwrap();
    let l = policy_logits(&mut g, rep).unwrap();
    let loss = g.cross_entropy(l, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(touched(&grads, &model, ParamGroup::Rep));
    assert!(touched(&grads, &model, ParamGroup::Policy));
    assert!(!touched(&grads, &model, ParamGroup::Value));
    assert!(!touched(&grads, &model, ParamGroup::Dynamics));

    let mut g = model.graph();
    let rep = encode(&model.config, &mut g, &batch).unwrap();
    let v = value(&mut g, rep).unwrap();
    let loss = g.sum(v).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(touched(&grads, &model, ParamGroup::Rep));
    assert!(touched(&grads, &model, ParamGroup::Value));
    assert!(!touched(&grads, &model, ParamGroup::Policy));
    assert!(!touched(&grads, &model, ParamGroup::Dynamics));

    let mut g = model.graph();
    let rep = encode(&model.config, &mut g, &batch).unwrap();
    let d = dynamics_logits(&model.config, &mut g, rep, &batch).unwrap();
    let cells: Vec<usize> = batch.iter().flat_map(|o| o.grid.iter().map(|&s| s as usize)).collect();
    let loss = g.cross_entropy(d, &cells).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(touched(&grads, &model, ParamGroup::Rep));
    assert!(touched(&grads, &model, ParamGroup::Dynamics));
    assert!(!touched(&grads, &model, ParamGroup::Policy));
    assert!(!touched(&grads, &model, ParamGroup::Value));
}

#[test]
fn teacher_is_an_immutable_copy() {
    let (mut model, obs) = setup();
    let batch = refs(&obs);
    let teacher = TeacherSnapshot::snapshot(&model, &[("run".into(), "t0".into())]);
    let hash = teacher.hash();
    let before = teacher.encode(&batch).unwrap();
    assert_eq!(before, encode_values(&model.config, &model.params, &batch).unwrap());

    for v in model.params.get_mut(ParamId(0)).data_mut() {
        *v += 1.0;
    }
    assert_eq!(teacher.encode(&batch).unwrap(), before);
    assert_ne!(encode_values(&model.config, &model.params, &batch).unwrap(), before);
    assert_eq!(teacher.hash(), hash);
    assert!(teacher.verify());
    assert_eq!(teacher.meta("run"), Some("t0"));
    assert!(!teacher.params().contains("pi.w"));
}

#[test]
fn teacher_round_trips_bit_identically() {
    let (model, obs) = setup();
    let batch = refs(&obs);
    let teacher = TeacherSnapshot::snapshot(&model, &[("demo_hash".into(), "abc".into())]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.ckpt");
    teacher.save(&path).unwrap();
    let loaded = TeacherSnapshot::load(&path).unwrap();
    assert_eq!(loaded.hash(), teacher.hash());
    assert_eq!(loaded.meta("demo_hash"), Some("abc"));
    let a = teacher.encode(&batch).unwrap();
    let b = loaded.encode(&batch).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn model_checkpoint_round_trips() {
    let (mut model, _) = setup();
    randomize_heads(&mut model, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path, &[]).unwrap();
    let (loaded, _) = Model::load(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.params.content_hash(), model.params.content_hash());
}

#[test]
fn distill_is_zero_for_identical_params_and_never_touches_the_teacher() {
    let (model, obs) = setup();
    let batch = refs(&obs);
    let teacher = TeacherSnapshot::snapshot(&model, &[]);
    for metric in [DistillMetric::MeanSquared, DistillMetric::L2] {
        let mut g = model.graph();
        let rep = encode(&model.config, &mut g, &batch).unwrap();
        let jd = distill_loss(&mut g, &model.config, rep, &batch, &teacher, metric).unwrap();
        if metric == DistillMetric::MeanSquared {
            assert_eq!(g.scalar_value(jd), 0.0);
        } else {
            assert!(g.scalar_value(jd) < 1e-5);
        }
        let grads = g.backward(jd).unwrap();
        assert_eq!(grads.params().len(), model.params.len());
    }
}

#[test]
fn distill_analytic_value() {
    let mut g = Graph::new();
    let s = g.variable(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
    let t = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let jd = distill_against(&mut g, s, t.clone(), DistillMetric::MeanSquared).unwrap();
    assert_eq!(g.scalar_value(jd), 1.0);
    let wrong = Tensor::zeros(&[1, 3]);
    assert!(matches!(
        distill_against(&mut g, s, wrong, DistillMetric::MeanSquared),
        Err(ModelError::Mismatch(_))
    ));
}

#[test]
fn teacher_to_model_keeps_heads_zero() {
    let (mut model, obs) = setup();
    randomize_heads(&mut model, 4);
    let teacher = TeacherSnapshot::snapshot(&model, &[]);
    let student = teacher.to_model().unwrap();
    assert!(student.params.by_name("pi.w").unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(
        student.params.by_name("dyn.w").unwrap(),
        model.params.by_name("dyn.w").unwrap()
    );
    let batch = refs(&obs);
    assert_eq!(teacher.encode(&batch).unwrap(), encode_values(&student.config, &student.params, &batch).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn distill_is_nonnegative_and_zero_only_on_equality(
        a in prop::collection::vec(-3.0f64..3.0, 8),
        b in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let mut g = Graph::new();
        let s = g.variable(Tensor::new(vec![2, 4], a.clone()).unwrap());
        let t = Tensor::new(vec![2, 4], b.clone()).unwrap();
        let jd = distill_against(&mut g, s, t, DistillMetric::MeanSquared).unwrap();
        let v = g.scalar_value(jd);
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, a == b);
    }
}
