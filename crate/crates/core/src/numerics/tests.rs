use proptest::prelude::*;

use super::suite::{check_mlp, check_primitive, PRIMITIVES};
use super::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let y = g.softmax_last(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln4() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 4], vec![0.3; 4]).unwrap());
    for t in 0..4 {
        let l = g.cross_entropy(x, &[t]).unwrap();
        assert!(close(g.scalar_value(l), 4f64.ln(), 1e-12));
    }
    assert!(close(4f64.ln(), 1.386294, 1e-6));
}

#[test]
fn squared_l2_analytic() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
    let b = g.constant(Tensor::from_vec(vec![0.0, 1.0]));
    let l = g.squared_l2(a, b).unwrap();
    assert_eq!(g.scalar_value(l), 2.0);
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    assert_eq!(grads.wrt(y).unwrap().data(), &[1.0]);
}

#[test]
fn relu_subgradient_is_zero_off_and_at_kink() {
    for x0 in [-1.0, 0.0] {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(x0));
        let y = g.relu(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0]);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(NumericsError::NotScalar(_))));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, NumericsError::Shape { op: "matmul", .. }));
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(1000.0));
    assert_eq!(g.exp(a).unwrap_err(), NumericsError::NonFinite("exp"));
}

#[test]
fn unknown_embedding_id_is_an_error() {
    let mut g = Graph::new();
    let t = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.embedding(t, &[3]), Err(NumericsError::Index { .. })));
    assert!(matches!(g.embedding_bag_mean(t, vec![vec![0, 5]]), Err(NumericsError::Index { .. })));
}

#[test]
fn empty_bag_is_zero_vector() {
    let mut g = Graph::new();
    let t = g.constant(Tensor::full(&[3, 2], 1.0));
    let y = g.embedding_bag_mean(t, vec![vec![], vec![0, 1]]).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(2.0));
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[2.0]);
}

#[test]
fn params_are_shared_between_uses_and_missing_ones_error() {
    let mut store = ParamStore::new();
    store.insert("rep.w", Tensor::scalar(3.0));
    let mut g = Graph::with_params(&store);
    let a = g.param("rep.w").unwrap();
    let b = g.param("rep.w").unwrap();
    assert_eq!(a, b);
    assert!(matches!(g.param("nope"), Err(NumericsError::MissingParam(_))));
    let y = g.mul(a, b).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.param(store.id("rep.w").unwrap()).unwrap().data(), &[6.0]);
}

#[test]
fn quadratic_grad_check_is_essentially_exact() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::new(vec![8, 8], (0..64).map(|i| i as f64 * 0.1 - 3.0).collect()).unwrap());
    let target = Tensor::full(&[8, 8], 0.5);
    let r = grad_check(&store, 1e-5, 0, |g| {
        let x = g.param("x")?;
        let t = g.constant(target.clone());
        g.squared_l2(x, t)
    })
    .unwrap();
    assert_eq!(r.checked, 50);
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn random_mlp_matches_finite_differences_over_100_configs() {
    for seed in 0..100 {
        let r = check_mlp(seed).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    for op in PRIMITIVES {
        for seed in 0..20 {
            let r = check_primitive(op, seed).unwrap();
            assert!(r.max_rel_error < 1e-4, "{op} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn backward_is_linear() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.7, 0.2, 0.9, -0.3]).unwrap());
    let x = Tensor::new(vec![1, 2], vec![0.5, -1.5]).unwrap();
    let build = |wf: f64, wg: f64| {
        let mut g = Graph::with_params(&store);
        let w = g.param("w").unwrap();
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, w).unwrap();
        let f = g.cross_entropy(h, &[2]).unwrap();
        let t = g.tanh(h).unwrap();
        let gg = g.sum(t).unwrap();
        let fs = g.scale(f, wf).unwrap();
        let gs = g.scale(gg, wg).unwrap();
        let y = g.add(fs, gs).unwrap();
        g.backward(y).unwrap().param(ParamId(0)).unwrap().clone()
    };
    let (a, b) = (0.7, -2.5);
    let combined = build(a, b);
    let f = build(1.0, 0.0);
    let gr = build(0.0, 1.0);
    for i in 0..6 {
        let want = a * f.data()[i] + b * gr.data()[i];
        assert!(close(combined.data()[i], want, 1e-12));
    }
}

#[test]
fn adam_defaults() {
    let c = OptimizerConfig::adam();
    assert_eq!((c.beta1, c.beta2, c.eps, c.lr), (0.99, 0.999, 1e-6, 1e-4));
    let r = OptimizerConfig::rmsprop();
    assert_eq!((r.alpha, r.eps), (0.99, 0.01));
}

fn grads_for(store: &ParamStore, g: f64) -> Gradients {
    let mut graph = Graph::with_params(store);
    let p = graph.param_id(ParamId(0)).unwrap();
    let y = graph.scale(p, g).unwrap();
    let s = graph.sum(y).unwrap();
    graph.backward(s).unwrap()
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::scalar(0.0));
    let mut opt = Optimizer::new(OptimizerConfig::adam());
    let grads = grads_for(&store, 1.0);
    opt.step(&mut store, &grads).unwrap();
    // at t=1 the bias-corrected moments are g and g^2
    let want = -1e-4 / (1.0 + 1e-6);
    assert!(close(store.get(ParamId(0)).item(), want, 1e-18));
    assert_eq!(opt.steps(), 1);
}

#[test]
fn zero_gradient_leaves_fresh_params_and_decays_moments() {
    for cfg in [OptimizerConfig::adam(), OptimizerConfig::rmsprop()] {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.25));
        let mut opt = Optimizer::new(cfg);
        let gr = grads_for(&store, 0.0);
        opt.step(&mut store, &gr).unwrap();
        assert_eq!(store.get(ParamId(0)).item(), 0.25);

        let gr = grads_for(&store, 1.0);
        opt.step(&mut store, &gr).unwrap();
        let v = opt.second_moment(0).unwrap().item();
        let gr = grads_for(&store, 0.0);
        opt.step(&mut store, &gr).unwrap();
        let decay = if cfg.kind == OptimizerKind::Adam { cfg.beta2 } else { cfg.alpha };
        assert!(close(opt.second_moment(0).unwrap().item(), v * decay, 1e-15));
    }
}

#[test]
fn rmsprop_step_formula() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::scalar(1.0));
    let cfg = OptimizerConfig::rmsprop();
    let mut opt = Optimizer::new(cfg);
    let gr = grads_for(&store, 2.0);
    opt.step(&mut store, &gr).unwrap();
    let v: f64 = 0.01 * 4.0;
    let want = 1.0 - cfg.lr * 2.0 / (v.sqrt() + cfg.eps);
    assert!(close(store.get(ParamId(0)).item(), want, 1e-15));
}

#[test]
fn clipping_caps_global_norm() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::scalar(0.0));
    let mut grads = grads_for(&store, 10.0);
    let before = clip_global_norm(&mut grads, 1.0);
    assert_eq!(before, 10.0);
    assert!(close(grads.global_norm(), 1.0, 1e-12));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax_last(x).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn primitives_match_finite_differences(op_idx in 0..PRIMITIVES.len(), seed in any::<u64>()) {
        let r = check_primitive(PRIMITIVES[op_idx], seed).unwrap();
        prop_assert!(r.max_rel_error < 1e-4, "{} {:?}", PRIMITIVES[op_idx], r);
    }
}
