//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as leaves borrowed from a [`ParamStore`]; a [`ParamMask`] decides which of
//! them want gradients. Gradients still flow *through* frozen parameters to
//! whatever trainable inputs lie upstream, but the weight-gradient products
//! of frozen tensors are skipped.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamMask, ParamStore};
use crate::tensor::{gemm, gemm_strided, GemmOperand, GemmOutput, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Marker for "no source element" in [`Graph::gather`].
pub const GATHER_NONE: u32 = u32::MAX;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Input,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    AddRow { a: NodeId, row: NodeId },
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    ReluTanh(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Matrix, rstd: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Matrix> },
    Gather { src: NodeId, idx: Vec<u32> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SumRows { a: NodeId, scale: f64 },
    Sum { inputs: Vec<NodeId>, scale: f64 },
    SmoothedNll { logits: NodeId, targets: Vec<u32>, ignore: Option<u32>, eps: f64, log_probs: Matrix },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    mask: ParamMask,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, mask: ParamMask) -> Self {
        assert_eq!(mask.len(), store.len(), "mask does not match parameter store");
        Self { store, mask, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    /// A graph in which nothing requires gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::new(store, ParamMask::none(store))
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node { value: Some(value), op: Op::Input, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let requires_grad = self.mask.contains(id);
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols() } else { av.rows() };
        let n = if tb { bv.rows() } else { bv.cols() };
        let mut out = Matrix::zeros(m, n);
        gemm(av, ta, bv, tb, &mut out, 0.0);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1 × cols` node `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(rv.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow { a, row }, &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// `max(0, tanh(x))`, the gate activation: zero at zero, bounded by 1.
    pub fn relu_tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(relu_tanh);
        self.push(out, Op::ReluTanh(a), &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Multi-head scaled dot-product attention without projections.
    ///
    /// `q` is `len_q × d`, `k` and `v` are `len_k × d`; head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`. With `causal`, query `i` only sees keys
    /// `j ≤ i`. The per-head results are concatenated back to `len_q × d`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.shape();
        let lk = kv.rows();
        assert_eq!(kv.cols(), d, "key width mismatch");
        assert_eq!(vv.shape(), (lk, d), "value shape mismatch");
        assert!(heads > 0 && d % heads == 0, "width not divisible by heads");
        assert!(lk > 0, "attention over an empty key set");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(lq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut s = Matrix::zeros(lq, lk);
            gemm_strided(
                lq,
                dh,
                lk,
                GemmOperand { data: &qv.data()[off..], rs: d as isize, cs: 1 },
                GemmOperand { data: &kv.data()[off..], rs: 1, cs: d as isize },
                GemmOutput { data: s.data_mut(), rs: lk as isize, cs: 1 },
                0.0,
            );
            for i in 0..lq {
                let row = s.row_mut(i);
                let visible = if causal { (i + 1).min(lk) } else { lk };
                let max = row[..visible].iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                let mut z = 0.0;
                for x in row[..visible].iter_mut() {
                    *x = (*x * scale - max).exp();
                    z += *x;
                }
                for x in row[..visible].iter_mut() {
                    *x /= z;
                }
                for x in row[visible..].iter_mut() {
                    *x = 0.0;
                }
            }
            gemm_strided(
                lq,
                lk,
                dh,
                GemmOperand { data: s.data(), rs: lk as isize, cs: 1 },
                GemmOperand { data: &vv.data()[off..], rs: d as isize, cs: 1 },
                GemmOutput { data: &mut out.data_mut()[off..], rs: d as isize, cs: 1 },
                0.0,
            );
            probs.push(s);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// `out.data[t] = src.data[idx[t]]`, or 0 where `idx[t] == GATHER_NONE`.
    /// Serves embedding lookup and im2col.
    pub fn gather(&mut self, src: NodeId, idx: Vec<u32>, rows: usize, cols: usize) -> NodeId {
        assert_eq!(idx.len(), rows * cols, "gather index length mismatch");
        let sv = self.value(src).data();
        let data = idx.iter().map(|&i| if i == GATHER_NONE { 0.0 } else { sv[i as usize] }).collect();
        let out = Matrix::from_vec(rows, cols, data);
        self.push(out, Op::Gather { src, idx }, &[src])
    }

    /// Rows `ids` of `table`.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let (n, d) = self.value(table).shape();
        let mut idx = Vec::with_capacity(ids.len() * d);
        for &t in ids {
            assert!((t as usize) < n, "embedding index {t} out of range {n}");
            idx.extend((0..d).map(|c| (t as usize * d + c) as u32));
        }
        self.gather(table, idx, ids.len(), d)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `scale · Σ_rows a`, a `1 × cols` node.
    pub fn sum_rows(&mut self, a: NodeId, scale: f64) -> NodeId {
        let av = self.value(a);
        let mut out = Matrix::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(scale);
        self.push(out, Op::SumRows { a, scale }, &[a])
    }

    /// `scale · Σ inputs` over equally shaped nodes.
    pub fn sum(&mut self, inputs: &[NodeId], scale: f64) -> NodeId {
        let mut out = self.value(inputs[0]).clone();
        for i in &inputs[1..] {
            out.add_assign(self.value(*i));
        }
        out.scale_assign(scale);
        self.push(out, Op::Sum { inputs: inputs.to_vec(), scale }, inputs)
    }

    pub fn mean(&mut self, inputs: &[NodeId]) -> NodeId {
        assert!(!inputs.is_empty(), "mean of no nodes");
        self.sum(inputs, 1.0 / inputs.len() as f64)
    }

    /// Label-smoothed negative log-likelihood, averaged over positions whose
    /// target is not `ignore`. Returns a `1 × 1` node.
    pub fn smoothed_nll(&mut self, logits: NodeId, targets: &[u32], ignore: Option<u32>, eps: f64) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let log_probs = crate::tensor::log_softmax_rows(lv);
        let loss = smoothed_nll_value(&log_probs, targets, ignore, eps);
        let op = Op::SmoothedNll { logits, targets: targets.to_vec(), ignore, eps, log_probs };
        self.push(Matrix::from_vec(1, 1, vec![loss]), op, &[logits])
    }

    /// Backpropagates from a `1 × 1` node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::empty(self.store.len());
        if !self.nodes[loss.0].requires_grad {
            return out;
        }
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: Matrix, grads: &mut [Option<Matrix>], out: &mut Gradients) {
        match &node.op {
            Op::Input => {}
            Op::Param(p) => out.accumulate_into(*p, g),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    // C = op(A)op(B): dop(A) = G op(B)^T
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    if *ta {
                        gemm(bv, *tb, &g, true, &mut da, 0.0);
                    } else {
                        gemm(&g, false, bv, !*tb, &mut da, 0.0);
                    }
                    acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    if *tb {
                        gemm(&g, true, av, *ta, &mut db, 0.0);
                    } else {
                        gemm(av, !*ta, &g, false, &mut db, 0.0);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
                if self.wants(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::AddRow { a, row } => {
                if self.wants(*row) {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(grads, *row, dr);
                }
                if self.wants(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, hadamard(&g, self.value(*b)));
                }
                if self.wants(*b) {
                    acc(grads, *b, hadamard(&g, self.value(*a)));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = zip_map(&g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                acc(grads, *a, zip_map(&g, x, |gi, xi| gi * gelu_grad(xi)));
            }
            Op::ReluTanh(a) => {
                let x = self.value(*a);
                let d = zip_map(&g, x, |gi, xi| {
                    if xi > 0.0 {
                        let t = xi.tanh();
                        gi * (1.0 - t * t)
                    } else {
                        0.0
                    }
                });
                acc(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma).data();
                let (rows, cols) = xhat.shape();
                if self.wants(*gamma) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for ((o, gi), xh) in dg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gi * xh;
                        }
                    }
                    acc(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for (o, gi) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gi;
                        }
                    }
                    acc(grads, *beta, db);
                }
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xr[c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let rs = rstd[r];
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let d = gr[c] * gv[c];
                            *o = rs * (d - mean_d - xr[c] * mean_dx);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, &g, grads);
            }
            Op::Gather { src, idx } => {
                let sv = self.value(*src);
                let mut d = Matrix::zeros(sv.rows(), sv.cols());
                let dd = d.data_mut();
                for (gi, &i) in g.data().iter().zip(idx) {
                    if i != GATHER_NONE {
                        dd[i as usize] += gi;
                    }
                }
                acc(grads, *src, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut d = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(grads, *p, d);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    if self.wants(*p) {
                        let d = Matrix::from_vec(rows, cols, g.data()[off * cols..(off + rows) * cols].to_vec());
                        acc(grads, *p, d);
                    }
                    off += rows;
                }
            }
            Op::SumRows { a, scale } => {
                let rows = self.value(*a).rows();
                let mut d = Matrix::zeros(rows, g.cols());
                for r in 0..rows {
                    for (o, gi) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = gi * scale;
                    }
                }
                acc(grads, *a, d);
            }
            Op::Sum { inputs, scale } => {
                let d = g.map(|x| x * scale);
                for i in inputs {
                    if self.wants(*i) {
                        acc(grads, *i, d.clone());
                    }
                }
            }
            Op::SmoothedNll { logits, targets, ignore, eps, log_probs } => {
                let upstream = g.data()[0];
                let (rows, vocab) = log_probs.shape();
                let valid = targets.iter().filter(|t| Some(**t) != *ignore).count();
                let mut d = Matrix::zeros(rows, vocab);
                if valid > 0 {
                    let w = upstream / valid as f64;
                    let smooth = eps / vocab as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        for (c, (o, lp)) in d.row_mut(r).iter_mut().zip(log_probs.row(r)).enumerate() {
                            let target = if c == t as usize { 1.0 - eps + smooth } else { smooth };
                            *o = w * (lp.exp() - target);
                        }
                    }
                }
                acc(grads, *logits, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[Matrix],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.shape();
        let lk = kv.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(lq, d);
        let mut dk = Matrix::zeros(lk, d);
        let mut dv = Matrix::zeros(lk, d);
        let di = d as isize;
        for (h, p) in probs.iter().enumerate() {
            let off = h * dh;
            // dV_h = P^T dO_h
            gemm_strided(
                lk,
                lq,
                dh,
                GemmOperand { data: p.data(), rs: 1, cs: lk as isize },
                GemmOperand { data: &g.data()[off..], rs: di, cs: 1 },
                GemmOutput { data: &mut dv.data_mut()[off..], rs: di, cs: 1 },
                0.0,
            );
            // dP = dO_h V_h^T
            let mut ds = Matrix::zeros(lq, lk);
            gemm_strided(
                lq,
                dh,
                lk,
                GemmOperand { data: &g.data()[off..], rs: di, cs: 1 },
                GemmOperand { data: &vv.data()[off..], rs: 1, cs: di },
                GemmOutput { data: ds.data_mut(), rs: lk as isize, cs: 1 },
                0.0,
            );
            for i in 0..lq {
                let pr = p.row(i);
                let dr = ds.row_mut(i);
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, pi) in dr.iter_mut().zip(pr) {
                    *x = pi * (*x - dot) * scale;
                }
            }
            // dQ_h = dS K_h, dK_h = dS^T Q_h
            gemm_strided(
                lq,
                lk,
                dh,
                GemmOperand { data: ds.data(), rs: lk as isize, cs: 1 },
                GemmOperand { data: &kv.data()[off..], rs: di, cs: 1 },
                GemmOutput { data: &mut dq.data_mut()[off..], rs: di, cs: 1 },
                0.0,
            );
            gemm_strided(
                lk,
                lq,
                dh,
                GemmOperand { data: ds.data(), rs: 1, cs: lk as isize },
                GemmOperand { data: &qv.data()[off..], rs: di, cs: 1 },
                GemmOutput { data: &mut dk.data_mut()[off..], rs: di, cs: 1 },
                0.0,
            );
        }
        if self.wants(q) {
            acc(grads, q, dq);
        }
        if self.wants(k) {
            acc(grads, k, dk);
        }
        if self.wants(v) {
            acc(grads, v, dv);
        }
    }
}

fn acc(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn relu_tanh(x: f64) -> f64 {
    if x > 0.0 {
        x.tanh()
    } else {
        0.0
    }
}

/// Loss value of [`Graph::smoothed_nll`] given row-wise log-probabilities.
pub fn smoothed_nll_value(log_probs: &Matrix, targets: &[u32], ignore: Option<u32>, eps: f64) -> f64 {
    let vocab = log_probs.cols() as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            continue;
        }
        let row = log_probs.row(r);
        let sum_lp: f64 = row.iter().sum();
        total -= (1.0 - eps) * row[t as usize] + eps / vocab * sum_lp;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
