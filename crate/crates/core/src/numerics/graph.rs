//! Tape of executed ops with reverse-mode accumulation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use std::borrow::Cow;
use std::collections::HashMap;

use super::tensor::gemm;
use super::{NumericsError, ParamId, ParamStore, Tensor};
use crate::hash::Fnv1a;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Embedding { table: Var, ids: Vec<usize> },
    EmbeddingBag { table: Var, bags: Vec<Vec<usize>> },
    ConcatLast(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SquaredL2(Var, Var),
    Gather { a: Var, idx: Vec<usize> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_nodes: HashMap<ParamId, Var>,
    relu_masks: Fnv1a,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a parameter; `None` when no path reaches it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(Tensor::sum_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.params.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }

    /// Adds `other` scaled by `c`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if let Some(t) = theirs {
                let mut t = t.clone();
                t.scale_assign(c);
                match mine {
                    Some(m) => m.add_assign(&t),
                    None => *mine = Some(t),
                }
            }
        }
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NumericsError::NonFinite(op))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph<'static> {
    /// A graph with no parameter store; only constants and variables.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            relu_masks: Fnv1a::default(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            params: Some(store),
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
            relu_masks: Fnv1a::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every relu activation pattern recorded so far. Two
    /// evaluations with equal signatures are on the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        self.relu_masks.finish()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, NumericsError> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Leaf that receives gradients (read back with [`Gradients::wrt`]).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param_id(&mut self, id: ParamId) -> Result<Var, NumericsError> {
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| NumericsError::MissingParam(format!("#{}", id.0)))?;
        if id.0 >= store.len() {
            return Err(NumericsError::MissingParam(format!("#{}", id.0)));
        }
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Param, true);
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    pub fn param(&mut self, name: &str) -> Result<Var, NumericsError> {
        let store = self
            .params
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))?;
        let id = store.id(name)?;
        self.param_id(id)
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_owned("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matmul: `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` with
    /// `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("bmm", ta, tb));
        }
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(shape_err("bmm", ta, tb));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let t = Tensor::new(vec![bs, m, n], out)?;
        self.push_owned("bmm", t, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_owned(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[n]` bias to every row of a tensor whose last axis is `n`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.last_dim();
        if tb.len() != n {
            return Err(shape_err("add_bias", ta, tb));
        }
        let bd = tb.data();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bd) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_owned("add_bias", t, Op::AddBias(a, bias), &[a, bias])
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_owned(name, t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    /// Rectifier; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let mask: Vec<u8> = self.value(a).data().iter().map(|&x| (x > 0.0) as u8).collect();
        self.relu_masks.update(&mask);
        self.map("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    /// Square root; negative inputs are an error.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, NumericsError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(NumericsError::NonFinite("sqrt"));
        }
        self.map("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    fn softmax_rows(data: &[f64], n: usize, log: bool) -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        for (row, o) in data.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for (x, y) in row.iter().zip(o.iter_mut()) {
                *y = if log { x - lse } else { (x - max).exp() / sum };
            }
        }
        out
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let n = ta.last_dim();
        let data = Self::softmax_rows(ta.data(), n, false);
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_owned("softmax", t, Op::SoftmaxLast(a), &[a])
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let n = ta.last_dim();
        let data = Self::softmax_rows(ta.data(), n, true);
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_owned("log_softmax", t, Op::LogSoftmaxLast(a), &[a])
    }

    /// Rows of a `[V, d]` table, one per id: `[len(ids), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(shape_err("embedding", tt, tt));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        self.push_owned(
            "embedding",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Mean of table rows per bag: `[n_bags, d]`. An empty bag maps to the
    /// zero vector.
    pub fn embedding_bag_mean(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(shape_err("embedding_bag", tt, tt));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = vec![0.0; bags.len() * d];
        for (bag, out) in bags.iter().zip(data.chunks_mut(d)) {
            if bag.is_empty() {
                continue;
            }
            let w = 1.0 / bag.len() as f64;
            for &id in bag {
                if id >= v {
                    return Err(NumericsError::Index {
                        op: "embedding_bag",
                        index: id,
                        bound: v,
                    });
                }
                for (o, x) in out.iter_mut().zip(&tt.data()[id * d..(id + 1) * d]) {
                    *o += w * x;
                }
            }
        }
        let t = Tensor::new(vec![bags.len(), d], data)?;
        self.push_owned("embedding_bag", t, Op::EmbeddingBag { table, bags }, &[table])
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = self.value(parts[0]);
        let lead: Vec<usize> = first.shape()[..first.rank() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != lead.len() + 1 || t.shape()[..lead.len()] != lead[..] {
                return Err(shape_err("concat", first, t));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        self.push_owned("concat", t, Op::ConcatLast(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push_owned("reshape", t, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).data().iter().sum();
        self.push_owned("sum", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(NumericsError::Empty("mean"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_owned("mean", Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Sums the last axis away: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let n = t.last_dim();
        let data: Vec<f64> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let shape = if t.rank() > 1 {
            t.shape()[..t.rank() - 1].to_vec()
        } else {
            vec![1]
        };
        let t = Tensor::new(shape, data)?;
        self.push_owned("sum_last", t, Op::SumLast(a), &[a])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        let c = t.last_dim();
        let rows = t.len() / c.max(1);
        if rows != targets.len() || rows == 0 {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let probs = Self::softmax_rows(t.data(), c, false);
        let mut loss = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt >= c {
                return Err(NumericsError::Index {
                    op: "cross_entropy",
                    index: tgt,
                    bound: c,
                });
            }
            // log-sum-exp form for accuracy at extreme logits
            let row = &t.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[tgt];
        }
        loss /= rows as f64;
        self.push_owned(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `sum((a - b)^2)`.
    pub fn squared_l2(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("squared_l2", ta, tb));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push_owned("squared_l2", Tensor::scalar(s), Op::SquaredL2(a, b), &[a, b])
    }

    /// Picks one entry per row: `out[i] = a[i, idx[i]]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let c = t.last_dim();
        if t.len() != c * idx.len() {
            return Err(NumericsError::Shape {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= c {
                return Err(NumericsError::Index {
                    op: "gather",
                    index: i,
                    bound: c,
                });
            }
            data.push(t.data()[r * c + i]);
        }
        self.push_owned(
            "gather",
            Tensor::from_vec(data),
            Op::Gather {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients, NumericsError> {
        let out_t = self.value(out);
        if out_t.len() != 1 {
            return Err(NumericsError::NotScalar(out_t.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::new(out_t.shape().to_vec(), vec![1.0])?);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        let n_params = self.params.map_or(0, ParamStore::len);
        let mut params: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (id, v) in &self.param_nodes {
            if let Some(g) = &grads[v.0] {
                check_finite("backward", g)?;
                params[id.0] = Some(g.clone());
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let da = slot(grads, *a, ta.shape());
                    gemm(m, n, k, gd, false, tb.data(), true, da.data_mut(), 1.0);
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, tb.shape());
                    gemm(k, m, n, ta.data(), true, gd, false, db.data_mut(), 1.0);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = if *trans_b { tb.shape()[1] } else { tb.shape()[2] };
                if self.wants(*a) {
                    let da = slot(grads, *a, ta.shape());
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut da.data_mut()[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, tb.shape());
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db.data_mut()[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB [n,k] = g^T [n,m] x A [m,k]
                            gemm(n, m, k, gi, true, ai, false, dbi, 1.0);
                        } else {
                            // dB [k,n] = A^T [k,m] x g [m,n]
                            gemm(k, m, n, ai, true, gi, false, dbi, 1.0);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*b) {
                    for (d, x) in slot(grads, *b, g.shape()).data_mut().iter_mut().zip(gd) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = slot(grads, *a, ta.shape());
                    for ((d, x), y) in da.data_mut().iter_mut().zip(gd).zip(tb.data()) {
                        *d += x * y;
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, tb.shape());
                    for ((d, x), y) in db.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        *d += x * y;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.wants(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*bias) {
                    let tb = self.value(*bias);
                    let n = tb.len();
                    let db = slot(grads, *bias, tb.shape());
                    for row in gd.chunks(n) {
                        for (d, x) in db.data_mut().iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    for (d, x) in slot(grads, *a, g.shape()).data_mut().iter_mut().zip(gd) {
                        *d += c * x;
                    }
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let da = slot(grads, *a, ta.shape());
                    for ((d, x), &inp) in da.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        if inp > 0.0 {
                            *d += x;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    let da = slot(grads, *a, g.shape());
                    for ((d, x), y) in da.data_mut().iter_mut().zip(gd).zip(out.data()) {
                        *d += x * (1.0 - y * y);
                    }
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    let da = slot(grads, *a, g.shape());
                    for ((d, x), y) in da.data_mut().iter_mut().zip(gd).zip(out.data()) {
                        *d += x * y;
                    }
                }
            }
            Op::Sqrt(a) => {
                if self.wants(*a) {
                    let da = slot(grads, *a, g.shape());
                    for ((d, x), y) in da.data_mut().iter_mut().zip(gd).zip(out.data()) {
                        *d += 0.5 * x / y;
                    }
                }
            }
            Op::SoftmaxLast(a) => {
                if self.wants(*a) {
                    let n = out.last_dim();
                    let da = slot(grads, *a, g.shape());
                    for ((drow, grow), yrow) in da.data_mut().chunks_mut(n).zip(gd.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (x - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxLast(a) => {
                if self.wants(*a) {
                    let n = out.last_dim();
                    let da = slot(grads, *a, g.shape());
                    for ((drow, grow), yrow) in da.data_mut().chunks_mut(n).zip(gd.chunks(n)).zip(out.data().chunks(n)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += x - y.exp() * gsum;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tt = self.value(*table);
                    let d = tt.shape()[1];
                    let dt = slot(grads, *table, tt.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, x) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::EmbeddingBag { table, bags } => {
                if self.wants(*table) {
                    let tt = self.value(*table);
                    let d = tt.shape()[1];
                    let dt = slot(grads, *table, tt.shape());
                    for (r, bag) in bags.iter().enumerate() {
                        if bag.is_empty() {
                            continue;
                        }
                        let w = 1.0 / bag.len() as f64;
                        for &id in bag {
                            for (o, x) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = out.last_dim();
                let rows = out.len() / total.max(1);
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.last_dim();
                    if self.wants(p) {
                        let dp = slot(grads, p, tp.shape());
                        for r in 0..rows {
                            for (d, x) in dp.data_mut()[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&gd[r * total + off..r * total + off + w])
                            {
                                *d += x;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let da = slot(grads, *a, ta.shape());
                    for (d, x) in da.data_mut().iter_mut().zip(gd) {
                        *d += x;
                    }
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let scale = if matches!(op, Op::MeanAll(_)) {
                        1.0 / ta.len() as f64
                    } else {
                        1.0
                    };
                    let gv = gd[0] * scale;
                    for d in slot(grads, *a, ta.shape()).data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::SumLast(a) => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let n = ta.last_dim();
                    let da = slot(grads, *a, ta.shape());
                    for (row, x) in da.data_mut().chunks_mut(n).zip(gd) {
                        for d in row {
                            *d += x;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let tl = self.value(*logits);
                    let c = tl.last_dim();
                    let scale = gd[0] / targets.len() as f64;
                    let dl = slot(grads, *logits, tl.shape());
                    for (r, &tgt) in targets.iter().enumerate() {
                        let row = &mut dl.data_mut()[r * c..(r + 1) * c];
                        for (j, d) in row.iter_mut().enumerate() {
                            let onehot = if j == tgt { 1.0 } else { 0.0 };
                            *d += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::SquaredL2(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let gv = gd[0];
                if self.wants(*a) {
                    let da = slot(grads, *a, ta.shape());
                    for ((d, x), y) in da.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        *d += 2.0 * gv * (x - y);
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, tb.shape());
                    for ((d, x), y) in db.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
                        *d -= 2.0 * gv * (x - y);
                    }
                }
            }
            Op::Gather { a, idx } => {
                if self.wants(*a) {
                    let ta = self.value(*a);
                    let c = ta.last_dim();
                    let da = slot(grads, *a, ta.shape());
                    for (r, (&i, x)) in idx.iter().zip(gd).enumerate() {
                        da.data_mut()[r * c + i] += x;
                    }
                }
            }
        }
    }
}

/// Gradient accumulator for node `v`, created zeroed on first use.
fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}
