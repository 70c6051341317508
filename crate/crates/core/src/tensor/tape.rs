//! The autodiff tape: every op records its inputs plus whatever it needs for
//! the backward pass; [`Tape::backward`] walks the records in reverse.

use crate::error::{Error, Result};
use crate::tensor::linalg::{gemm, MatMut, MatRef};
use crate::tensor::params::{Gradients, ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rstd: Vec<T>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Attention {
        qkv: NodeId,
        shape: AttnShape,
        key_lens: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout {
        x: NodeId,
        scale_mask: Vec<T>,
    },
    Softmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
        reduction: Reduction,
    },
    SumAll(NodeId),
}

#[derive(Clone, Copy, Debug)]
struct AttnShape {
    batch: usize,
    seq: usize,
    heads: usize,
    hidden: usize,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

struct Node<T> {
    op: Op<T>,
    /// `None` for parameter nodes, whose value lives in the parameter set.
    value: Option<Tensor<T>>,
}

/// Records a forward computation over a borrowed parameter set.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Row-wise softmax over the last axis, stabilized by subtracting the row max.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let cols = x.cols();
    if cols > 0 {
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    out
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(pid), _) => self.params.get(*pid),
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// The node standing for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<NodeId> {
        let id = self.params.require(name)?;
        Ok(self.param(id))
    }

    /// Parameter nodes created so far.
    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.param_nodes[id.0]
    }

    fn expect_2d(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what} expects a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.expect_2d(a, "matmul")?;
        let (k2, n) = self.expect_2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            T::one(),
            self.value(a).as_mat(),
            self.value(b).as_mat(),
            T::zero(),
            MatMut::row_major(out.data_mut(), m, n),
        );
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a * b^T` with `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.expect_2d(a, "matmul_nt")?;
        let (n, k2) = self.expect_2d(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt [{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            T::one(),
            self.value(a).as_mat(),
            self.value(b).as_mat().t(),
            T::zero(),
            MatMut::row_major(out.data_mut(), m, n),
        );
        Ok(self.push(Op::MatMulNT(a, b), out))
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let vb = self.value(bias);
        let n = va.cols();
        if vb.len() != n {
            return Err(Error::Shape(format!(
                "add_row: bias of {} values for rows of {n}",
                vb.len()
            )));
        }
        let mut out = va.clone();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                for (x, &b) in row.iter_mut().zip(vb.data()) {
                    *x = *x + b;
                }
            }
        }
        Ok(self.push(Op::AddRow(a, bias), out))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
        self.push(Op::Gelu(a), out)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let out = softmax_rows(self.value(a));
        self.push(Op::Softmax(a), out)
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let n = vx.cols();
        if n == 0 || vx.shape().is_empty() {
            return Err(Error::Shape("layer_norm over an empty last axis".into()));
        }
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.len() != n || vb.len() != n {
            return Err(Error::Shape(format!(
                "layer_norm: gamma/beta sizes {}/{} for rows of {n}",
                vg.len(),
                vb.len()
            )));
        }
        let eps = T::from_f64(eps);
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut out = vx.clone();
        let mut rstd = Vec::with_capacity(vx.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let r = T::one() / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * r * vg.data()[i] + vb.data()[i];
            }
            rstd.push(r);
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, rstd }, out))
    }

    /// Embedding lookup: rows of a `[V, H]` table.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, h) = self.expect_2d(table, "gather")?;
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("row {id} outside a table of {v} rows")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::from_vec(&[ids.len(), h], data)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
        ))
    }

    /// Selects rows of a `[m, n]` matrix.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, n) = self.expect_2d(x, "select_rows")?;
        let vx = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Input(format!("row {r} outside a matrix of {m} rows")));
            }
            data.extend_from_slice(vx.row(r));
        }
        let out = Tensor::from_vec(&[rows.len(), n], data)?;
        Ok(self.push(
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            out,
        ))
    }

    /// Multiplies by a fixed mask whose entries are 0 or `1 / keep_prob`.
    pub fn dropout(&mut self, x: NodeId, scale_mask: Vec<T>) -> Result<NodeId> {
        let vx = self.value(x);
        if scale_mask.len() != vx.len() {
            return Err(Error::Shape("dropout mask size differs from input".into()));
        }
        let data = vx.data().iter().zip(&scale_mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_vec(vx.shape(), data)?;
        Ok(self.push(Op::Dropout { x, scale_mask }, out))
    }

    /// Multi-head scaled dot-product self-attention over packed projections.
    ///
    /// `qkv` is `[batch * seq, 3 * hidden]` holding Q, K and V side by side.
    /// Row `b` attends only to its first `key_lens[b]` positions; the keys past
    /// that (padding) get exactly zero probability and are never read.
    pub fn attention(&mut self, qkv: NodeId, batch: usize, seq: usize, heads: usize, key_lens: &[usize]) -> Result<NodeId> {
        let (rows, three_h) = self.expect_2d(qkv, "attention")?;
        if rows != batch * seq || three_h % 3 != 0 || (three_h / 3) % heads != 0 {
            return Err(Error::Shape(format!(
                "attention input [{rows},{three_h}] for batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        if key_lens.len() != batch || key_lens.iter().any(|&k| k == 0 || k > seq) {
            return Err(Error::Shape("attention key lengths must be in 1..=seq".into()));
        }
        let shape = AttnShape {
            batch,
            seq,
            heads,
            hidden: three_h / 3,
        };
        let (h, d) = (shape.hidden, shape.head_dim());
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let src = self.value(qkv).data();
        let mut out = Tensor::zeros(&[rows, h]);
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            let kl = key_lens[b];
            for hd in 0..heads {
                let base = b * seq * three_h + hd * d;
                let q = MatRef::new(src, base, seq, d, three_h, 1);
                let k = MatRef::new(src, base + h, kl, d, three_h, 1);
                let v = MatRef::new(src, base + 2 * h, kl, d, three_h, 1);
                let p_off = (b * heads + hd) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm(scale, q, k.t(), T::zero(), MatMut::new(p, 0, seq, kl, seq, 1));
                for row in p.chunks_mut(seq) {
                    softmax_in_place(&mut row[..kl]);
                }
                let pr = MatRef::new(&probs[p_off..p_off + seq * seq], 0, seq, kl, seq, 1);
                gemm(
                    T::one(),
                    pr,
                    v,
                    T::zero(),
                    MatMut::new(out.data_mut(), b * seq * h + hd * d, seq, d, h, 1),
                );
            }
        }
        Ok(self.push(
            Op::Attention {
                qkv,
                shape,
                key_lens: key_lens.to_vec(),
                probs,
            },
            out,
        ))
    }

    /// Attention probabilities of the attention node `id`: `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Softmax cross-entropy of `[n, V]` logits against `n` target classes.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], reduction: Reduction) -> Result<NodeId> {
        let (n, v) = self.expect_2d(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target {bad} outside {v} classes")));
        }
        let probs = softmax_rows(self.value(logits));
        let mut total = T::zero();
        let lv = self.value(logits);
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total = total + (lse - row[t]);
        }
        if reduction == Reduction::Mean && n > 0 {
            total = total / T::from_f64(n as f64);
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: probs.into_data(),
                reduction,
            },
            Tensor::scalar(total),
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::new(self.params.len());
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => out.accumulate(*pid, self.params.get(*pid).shape(), &g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    let gm = MatRef::row_major(&g, m, n);
                    let mut ga = vec![T::zero(); m * k];
                    gemm(T::one(), gm, vb.as_mat().t(), T::zero(), MatMut::row_major(&mut ga, m, k));
                    let mut gb = vec![T::zero(); k * n];
                    gemm(T::one(), va.as_mat().t(), gm, T::zero(), MatMut::row_major(&mut gb, k, n));
                    add_into(&mut grads[a.0], ga);
                    add_into(&mut grads[b.0], gb);
                }
                Op::MatMulNT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                    let gm = MatRef::row_major(&g, m, n);
                    let mut ga = vec![T::zero(); m * k];
                    gemm(T::one(), gm, vb.as_mat(), T::zero(), MatMut::row_major(&mut ga, m, k));
                    let mut gb = vec![T::zero(); n * k];
                    gemm(T::one(), gm.t(), va.as_mat(), T::zero(), MatMut::row_major(&mut gb, n, k));
                    add_into(&mut grads[a.0], ga);
                    add_into(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], g.clone());
                    add_into(&mut grads[b.0], g);
                }
                Op::AddRow(a, bias) => {
                    let n = self.value(*bias).len();
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    add_into(&mut grads[a.0], g);
                    add_into(&mut grads[bias.0], gb);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga = g.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    let gb = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    add_into(&mut grads[a.0], ga);
                    add_into(&mut grads[b.0], gb);
                }
                Op::Scale(a, c) => {
                    add_into(&mut grads[a.0], g.iter().map(|&x| x * *c).collect());
                }
                Op::Gelu(a) => {
                    let va = self.value(*a).data();
                    add_into(&mut grads[a.0], g.iter().zip(va).map(|(&x, &v)| x * gelu_grad(v)).collect());
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let n = y.cols();
                    let mut ga = vec![T::zero(); g.len()];
                    for ((gr, yr), out) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                        for i in 0..n {
                            out[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    add_into(&mut grads[a.0], ga);
                }
                Op::LayerNorm { x, gamma, beta, rstd } => {
                    let vx = self.value(*x);
                    let vg = self.value(*gamma).data();
                    let n = vx.cols();
                    let inv_n = T::from_f64(1.0 / n as f64);
                    let mut gx = vec![T::zero(); vx.len()];
                    let mut gg = vec![T::zero(); n];
                    let mut gbeta = vec![T::zero(); n];
                    let mut xhat = vec![T::zero(); n];
                    let mut dxhat = vec![T::zero(); n];
                    for (r, (xr, gr)) in vx.data().chunks(n).zip(g.chunks(n)).enumerate() {
                        let mean = xr.iter().copied().sum::<T>() * inv_n;
                        let rs = rstd[r];
                        for i in 0..n {
                            xhat[i] = (xr[i] - mean) * rs;
                            dxhat[i] = gr[i] * vg[i];
                            gg[i] = gg[i] + gr[i] * xhat[i];
                            gbeta[i] = gbeta[i] + gr[i];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_n;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        let out = &mut gx[r * n..(r + 1) * n];
                        for i in 0..n {
                            out[i] = rs * (dxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                    add_into(&mut grads[gamma.0], gg);
                    add_into(&mut grads[beta.0], gbeta);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let h = tv.cols();
                    let mut gt = vec![T::zero(); tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * h..(id + 1) * h];
                        for (d, &s) in dst.iter_mut().zip(&g[r * h..(r + 1) * h]) {
                            *d = *d + s;
                        }
                    }
                    add_into(&mut grads[table.0], gt);
                }
                Op::SelectRows { x, rows } => {
                    let vx = self.value(*x);
                    let n = vx.cols();
                    let mut gx = vec![T::zero(); vx.len()];
                    for (r, &src) in rows.iter().enumerate() {
                        let dst = &mut gx[src * n..(src + 1) * n];
                        for (d, &s) in dst.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d = *d + s;
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
                Op::Dropout { x, scale_mask } => {
                    add_into(&mut grads[x.0], g.iter().zip(scale_mask).map(|(&a, &m)| a * m).collect());
                }
                Op::Attention {
                    qkv,
                    shape,
                    key_lens,
                    probs,
                } => {
                    let gq = self.attention_backward(*qkv, *shape, key_lens, probs, &g);
                    add_into(&mut grads[qkv.0], gq);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    reduction,
                } => {
                    let v = self.value(*logits).cols();
                    let mut scale = g[0];
                    if *reduction == Reduction::Mean && !targets.is_empty() {
                        scale = scale / T::from_f64(targets.len() as f64);
                    }
                    let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * v + t] = gl[r * v + t] - scale;
                    }
                    add_into(&mut grads[logits.0], gl);
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).len();
                    add_into(&mut grads[a.0], vec![g[0]; n]);
                }
            }
        }
        Ok(out)
    }

    fn attention_backward(&self, qkv: NodeId, s: AttnShape, key_lens: &[usize], probs: &[T], g: &[T]) -> Vec<T> {
        let src = self.value(qkv).data();
        let (h, d, seq) = (s.hidden, s.head_dim(), s.seq);
        let three_h = 3 * h;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let mut gq = vec![T::zero(); src.len()];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..s.batch {
            let kl = key_lens[b];
            for hd in 0..s.heads {
                let base = b * seq * three_h + hd * d;
                let go = MatRef::new(g, b * seq * h + hd * d, seq, d, h, 1);
                let q = MatRef::new(src, base, seq, d, three_h, 1);
                let k = MatRef::new(src, base + h, kl, d, three_h, 1);
                let v = MatRef::new(src, base + 2 * h, kl, d, three_h, 1);
                let p_off = (b * s.heads + hd) * seq * seq;
                let p = MatRef::new(probs, p_off, seq, kl, seq, 1);
                // dV = P^T dO
                gemm(T::one(), p.t(), go, T::zero(), MatMut::new(&mut gq, base + 2 * h, kl, d, three_h, 1));
                // dP = dO V^T
                gemm(T::one(), go, v.t(), T::zero(), MatMut::new(&mut dp, 0, seq, kl, seq, 1));
                // dS = P * (dP - rowsum(dP * P))
                for i in 0..seq {
                    let prow = &probs[p_off + i * seq..p_off + i * seq + kl];
                    let drow = &mut dp[i * seq..i * seq + kl];
                    let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot);
                    }
                }
                let ds = MatRef::new(&dp, 0, seq, kl, seq, 1);
                // dQ = scale * dS K ; dK = scale * dS^T Q
                gemm(scale, ds, k, T::zero(), MatMut::new(&mut gq, base, seq, d, three_h, 1));
                gemm(scale, ds.t(), q, T::zero(), MatMut::new(&mut gq, base + h, kl, d, three_h, 1));
            }
        }
        gq
    }
}
