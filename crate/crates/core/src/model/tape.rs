//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably and records every operation
//! of one forward pass. [`Tape::backward`] takes seed gradients for any set
//! of output nodes and returns dense gradients for the parameters that were
//! used. Tapes are cheap and independent, so per-example passes can run on
//! separate threads against the same parameters.

use std::collections::HashMap;

use super::tensor::{axpy, dot, matmul, matmul_t, t_matmul_into, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Named model parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradients; `None` where a parameter was not used.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.scale(k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    Softmax(NodeId),
    Sigmoid(NodeId),
    Mask {
        x: NodeId,
        mask: Vec<f64>,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id.0].op {
            Op::Param(p) => self.params.get(p),
            _ => &self.nodes[id.0].value,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: usize) -> NodeId {
        if let Some(n) = self.param_nodes[id] {
            return n;
        }
        let n = self.push(Tensor::zeros(0, 0), Op::Param(id));
        self.param_nodes[id] = Some(n);
        n
    }

    pub fn param_by_name(&mut self, name: &str) -> NodeId {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.param(id)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((1, v.cols), b.shape(), "bias shape mismatch");
        for r in 0..v.rows {
            axpy(v.row_mut(r), 1.0, &b.data);
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            let u = GELU_C * (*x + 0.044715 * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        }
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = g.data[c] * h + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention. `q` is `Tq × d`, `k` and `v`
    /// are `Tk × d`; heads split `d` evenly. With `causal`, query `i` sees
    /// keys `0..=i`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.shape();
        let tk = kv.rows;
        assert_eq!(d % heads, 0);
        assert_eq!(kv.cols, d);
        assert_eq!(vv.shape(), (tk, d));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = Tensor::zeros(tq, d);
        let mut scores = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qi = &qv.row(i)[off..off + dh];
                let visible = if causal { (i + 1).min(tk) } else { tk };
                let mut max = f64::NEG_INFINITY;
                for (j, slot) in scores.iter_mut().enumerate().take(visible) {
                    let s = dot(qi, &kv.row(j)[off..off + dh]) * scale;
                    *slot = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(visible) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let orow = &mut out.data[i * d + off..i * d + off + dh];
                for j in 0..visible {
                    let p = scores[j] / z;
                    prow[j] = p;
                    axpy(orow, p, &vv.row(j)[off..off + dh]);
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x = sigmoid(*x);
        }
        self.push(v, Op::Sigmoid(a))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let mut v = self.value(x).clone();
        assert_eq!(v.len(), mask.len());
        for (a, m) in v.data.iter_mut().zip(&mask) {
            *a *= m;
        }
        self.push(v, Op::Mask { x, mask })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let xv = self.value(x);
        let mut out = Tensor::zeros(rows.len(), xv.cols);
        for (r, &src) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(src));
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Back-propagates the given output gradients and returns gradients for
    /// every parameter reached.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            debug_assert_eq!(g.shape(), self.value(id).shape());
            acc(&mut grads, id, g);
        }
        let mut out = Gradients::empty(self.params.len());
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(p) => out.grads[*p] = Some(g),
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Tensor::zeros(t.rows, t.cols);
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(dt.row_mut(i), 1.0, g.row(r));
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul_t(&g, bv));
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    t_matmul_into(av, &g, &mut db);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul(&g, bv));
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    t_matmul_into(&g, av, &mut db);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        axpy(&mut db.data, 1.0, g.row(r));
                    }
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut dx = g;
                    for (d, &x) in dx.data.iter_mut().zip(&x.data) {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let (rows, cols) = g.shape();
                    let n = cols as f64;
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            dgamma.data[c] += gr[c] * xh[c];
                            dbeta.data[c] += gr[c];
                            dxhat[c] = gr[c] * gv.data[c];
                            sum_d += dxhat[c];
                            sum_dx += dxhat[c] * xh[c];
                        }
                        let is = inv_std[r];
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            out[c] = is / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                    acc(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (tq, d) = qv.shape();
                    let tk = kv.rows;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Tensor::zeros(tq, d);
                    let mut dk = Tensor::zeros(tk, d);
                    let mut dv = Tensor::zeros(tk, d);
                    let mut dp = vec![0.0; tk];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..tq {
                            let go = &g.row(i)[off..off + dh];
                            let prow = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                            let mut s = 0.0;
                            for j in 0..tk {
                                if prow[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                dp[j] = dot(go, &vv.row(j)[off..off + dh]);
                                s += dp[j] * prow[j];
                                axpy(&mut dv.row_mut(j)[off..off + dh], prow[j], go);
                            }
                            let qi = &qv.row(i)[off..off + dh];
                            for j in 0..tk {
                                if prow[j] == 0.0 {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - s) * scale;
                                axpy(
                                    &mut dq.row_mut(i)[off..off + dh],
                                    ds,
                                    &kv.row(j)[off..off + dh],
                                );
                                axpy(&mut dk.row_mut(j)[off..off + dh], ds, qi);
                            }
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = g;
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let s = dot(dx.row(r), yr);
                        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = yv * (*d - s);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut dx = g;
                    for (d, &yv) in dx.data.iter_mut().zip(&y.data) {
                        *d *= yv * (1.0 - yv);
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::Mask { x, mask } => {
                    let mut dx = g;
                    for (d, m) in dx.data.iter_mut().zip(mask) {
                        *d *= m;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(dx.row_mut(src), 1.0, g.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
