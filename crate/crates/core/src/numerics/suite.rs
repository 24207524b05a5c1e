//! Finite-difference checks of every primitive op on random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckReport, Graph, NumericsError, ParamStore, Tensor, Var};
use crate::hash::mix_seed;

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "bmm",
    "bmm_t",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "relu",
    "tanh",
    "exp",
    "sqrt",
    "softmax",
    "log_softmax",
    "embedding",
    "embedding_bag_mean",
    "concat",
    "reshape",
    "sum",
    "mean",
    "sum_last",
    "cross_entropy",
    "squared_l2",
    "gather",
];

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Sum of `out` weighted by a fixed random tensor of the same shape.
fn project(g: &mut Graph<'_>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var, NumericsError> {
    let w = random_tensor(rng, g.value(out).shape(), 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Builds inputs for one random configuration of `op` and grad-checks it.
pub fn check_primitive(op: &str, seed: u64) -> Result<GradCheckReport, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let b = rng.gen_range(1..4);
    let mut store = ParamStore::new();
    let mut ids: Vec<usize> = Vec::new();
    let mut bags: Vec<Vec<usize>> = Vec::new();
    match op {
        "matmul" => {
            store.insert("a", random_tensor(&mut rng, &[m, k], 1.0));
            store.insert("b", random_tensor(&mut rng, &[k, n], 1.0));
        }
        "bmm" => {
            store.insert("a", random_tensor(&mut rng, &[b, m, k], 1.0));
            store.insert("b", random_tensor(&mut rng, &[b, k, n], 1.0));
        }
        "bmm_t" => {
            store.insert("a", random_tensor(&mut rng, &[b, m, k], 1.0));
            store.insert("b", random_tensor(&mut rng, &[b, n, k], 1.0));
        }
        "add" | "sub" | "mul" | "squared_l2" => {
            store.insert("a", random_tensor(&mut rng, &[m, n], 1.0));
            store.insert("b", random_tensor(&mut rng, &[m, n], 1.0));
        }
        "add_bias" => {
            store.insert("a", random_tensor(&mut rng, &[m, n], 1.0));
            store.insert("b", random_tensor(&mut rng, &[n], 1.0));
        }
        "concat" => {
            store.insert("a", random_tensor(&mut rng, &[m, k], 1.0));
            store.insert("b", random_tensor(&mut rng, &[m, n], 1.0));
        }
        "embedding" | "embedding_bag_mean" => {
            store.insert("a", random_tensor(&mut rng, &[k + 1, n], 1.0));
            ids = (0..m).map(|_| rng.gen_range(0..=k)).collect();
            bags = (0..m)
                .map(|_| {
                    let len = rng.gen_range(0..4);
                    (0..len).map(|_| rng.gen_range(0..=k)).collect()
                })
                .collect();
        }
        "cross_entropy" | "gather" => {
            store.insert("a", random_tensor(&mut rng, &[m, n], 2.0));
            ids = (0..m).map(|_| rng.gen_range(0..n)).collect();
        }
        _ => {
            store.insert("a", random_tensor(&mut rng, &[m, n], 1.0));
        }
    }
    let proj_seed = rng.gen::<u64>();
    let check_seed = rng.gen::<u64>();
    let op = op.to_string();
    grad_check(&store, 1e-5, check_seed, |g| {
        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
        let a = g.param("a")?;
        let out = match op.as_str() {
            "matmul" => {
                let b = g.param("b")?;
                g.matmul(a, b)?
            }
            "bmm" | "bmm_t" => {
                let b = g.param("b")?;
                g.bmm(a, b, op == "bmm_t")?
            }
            "add" => {
                let b = g.param("b")?;
                g.add(a, b)?
            }
            "sub" => {
                let b = g.param("b")?;
                g.sub(a, b)?
            }
            "mul" => {
                let b = g.param("b")?;
                g.mul(a, b)?
            }
            "add_bias" => {
                let b = g.param("b")?;
                g.add_bias(a, b)?
            }
            "concat" => {
                let b = g.param("b")?;
                g.concat_last(&[a, b])?
            }
            "scale" => g.scale(a, -1.7)?,
            "relu" => g.relu(a)?,
            "tanh" => g.tanh(a)?,
            "exp" => g.exp(a)?,
            "sqrt" => {
                let sq = g.mul(a, a)?;
                let c = g.constant(Tensor::full(g.value(a).shape(), 0.1));
                let pos = g.add(sq, c)?;
                g.sqrt(pos)?
            }
            "softmax" => g.softmax_last(a)?,
            "log_softmax" => g.log_softmax_last(a)?,
            "embedding" => g.embedding(a, &ids)?,
            "embedding_bag_mean" => g.embedding_bag_mean(a, bags.clone())?,
            "reshape" => {
                let len = g.value(a).len();
                g.reshape(a, &[len])?
            }
            "sum" => return g.sum(a),
            "mean" => return g.mean(a),
            "sum_last" => g.sum_last(a)?,
            "cross_entropy" => return g.cross_entropy(a, &ids),
            "squared_l2" => {
                let b = g.param("b")?;
                return g.squared_l2(a, b);
            }
            "gather" => g.gather(a, &ids)?,
            other => panic!("unknown primitive {other}"),
        };
        project(g, out, &mut prng)
    })
}

/// Worst report per primitive over `configs` random configurations.
pub fn primitive_suite(configs: usize, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>, NumericsError> {
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for (p, &op) in PRIMITIVES.iter().enumerate() {
        let mut worst = GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for c in 0..configs {
            let r = check_primitive(op, mix_seed(seed, (p * 100_003 + c) as u64))?;
            worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
            worst.checked += r.checked;
            worst.skipped += r.skipped;
        }
        out.push((op, worst));
    }
    Ok(out)
}

/// Random MLP `x -> relu -> relu -> linear` with a cross-entropy loss.
pub fn check_mlp(seed: u64) -> Result<GradCheckReport, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.gen_range(1..5);
    let dims = [rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..5)];
    let mut store = ParamStore::new();
    for l in 0..3 {
        store.insert(&format!("w{l}"), random_tensor(&mut rng, &[dims[l], dims[l + 1]], 1.0));
        store.insert(&format!("b{l}"), random_tensor(&mut rng, &[dims[l + 1]], 0.5));
    }
    let x = random_tensor(&mut rng, &[batch, dims[0]], 1.0);
    let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..dims[3])).collect();
    let check_seed = rng.gen::<u64>();
    grad_check(&store, 1e-5, check_seed, |g| {
        let mut h = g.constant(x.clone());
        for l in 0..3 {
            let w = g.param(&format!("w{l}"))?;
            let b = g.param(&format!("b{l}"))?;
            let z = g.matmul(h, w)?;
            h = g.add_bias(z, b)?;
            if l < 2 {
                h = g.relu(h)?;
            }
        }
        g.cross_entropy(h, &targets)
    })
}
