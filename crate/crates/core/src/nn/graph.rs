//! Tape-based reverse-mode differentiation over the kernels in [`super::ops`]
//! and [`super::attention`].
//!
//! Forward values are computed with exactly the same kernels as the
//! streaming inference paths, so a graph forward pass reproduces inference
//! numerics row for row.

use super::attention::{causal_attention_backward, causal_attention_with_probs, AttentionConfig, AttentionProbs};
use super::ops::{self, rope_freqs, rope_rotate, rope_table};
use super::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: NodeId, w: NodeId, d_in: usize, d_out: usize },
    /// `x · tableᵀ` with `table` `[rows, d]`.
    LinearTransposed { x: NodeId, table: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { x: NodeId, row: NodeId },
    ScaleOnePlus { x: NodeId, g: NodeId },
    RmsNorm { x: NodeId, w: NodeId, eps: f32 },
    Silu(NodeId),
    Gelu(NodeId),
    Rope { x: NodeId, head_dim: usize, start: usize, theta: f32 },
    Attention { q: NodeId, k: NodeId, v: NodeId, cfg: AttentionConfig, probs: AttentionProbs },
    Conv { x: NodeId, w: NodeId, c_in: usize, c_out: usize, stride: usize },
    Rows { x: NodeId, start: usize },
    Reshape(NodeId),
    Gather { table: NodeId, ids: Vec<Option<usize>> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<f32>, z_coeff: f32, lse: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Scalar loss decomposition recorded by [`Graph::cross_entropy_z`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ce: f32,
    pub z: f32,
    pub log_z_abs_mean: f32,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn data(&self, id: NodeId) -> &[f32] {
        self.nodes[id].value.data()
    }

    /// `[T, d_in] · [d_in, d_out]`
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let ws = self.value(w).shape().to_vec();
        let (d_in, d_out) = (ws[0], ws[1]);
        let xv = self.value(x);
        assert_eq!(xv.cols(), d_in, "linear: input width");
        let rows = xv.rows();
        let y = ops::linear_rows(xv.data(), self.data(w), d_in, d_out);
        self.push(Tensor::from_parts(vec![rows, d_out], y), Op::Linear { x, w, d_in, d_out }, &[x, w])
    }

    /// `[T, d] · tableᵀ` where `table` is `[V, d]`.
    pub fn linear_transposed(&mut self, x: NodeId, table: NodeId) -> NodeId {
        let (xv, tv) = (self.value(x), self.value(table));
        let (rows, d) = (xv.rows(), xv.cols());
        let v = tv.rows();
        assert_eq!(tv.cols(), d, "linear_transposed: width");
        let mut y = vec![0.0; rows * v];
        for r in 0..rows {
            let xr = xv.row(r);
            for o in 0..v {
                y[r * v + o] = ops::dot(xr, tv.row(o));
            }
        }
        self.push(Tensor::from_parts(vec![rows, v], y), Op::LinearTransposed { x, table }, &[x, table])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shapes");
        let y: Vec<f32> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shapes");
        let y: Vec<f32> = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[d]` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (xv, rv) = (self.value(x), self.value(row));
        let d = xv.cols();
        assert_eq!(rv.len(), d, "add_row: width");
        let mut y = xv.data().to_vec();
        for yr in y.chunks_exact_mut(d) {
            for (a, b) in yr.iter_mut().zip(rv.data()) {
                *a += b;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::AddRow { x, row }, &[x, row])
    }

    /// `x ⊙ (1 + g)` with `g` a `[d]` row broadcast over rows.
    pub fn scale_one_plus(&mut self, x: NodeId, g: NodeId) -> NodeId {
        let (xv, gv) = (self.value(x), self.value(g));
        let d = xv.cols();
        assert_eq!(gv.len(), d, "scale_one_plus: width");
        let mut y = xv.data().to_vec();
        for yr in y.chunks_exact_mut(d) {
            for (a, b) in yr.iter_mut().zip(gv.data()) {
                *a *= 1.0 + b;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::ScaleOnePlus { x, g }, &[x, g])
    }

    pub fn rms_norm(&mut self, x: NodeId, w: NodeId, eps: f32) -> NodeId {
        let y = ops::rms_norm_rows(self.data(x), self.data(w), eps);
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::RmsNorm { x, w, eps }, &[x, w])
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let y = self.data(x).iter().map(|&v| ops::silu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::Silu(x), &[x])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let y = self.data(x).iter().map(|&v| ops::gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::Gelu(x), &[x])
    }

    /// Rotary embedding over rows at positions `start, start+1, …`.
    pub fn rope(&mut self, x: NodeId, head_dim: usize, start: usize, theta: f32) -> NodeId {
        let freqs = rope_freqs(head_dim, theta);
        let xv = self.value(x);
        let mut y = xv.data().to_vec();
        let d = xv.cols();
        for (r, yr) in y.chunks_exact_mut(d).enumerate() {
            let (c, s) = rope_table(start + r, &freqs);
            rope_rotate(yr, head_dim, &c, &s, 1.0);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::Rope { x, head_dim, start, theta }, &[x])
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, cfg: AttentionConfig) -> NodeId {
        let need = [q, k, v].iter().any(|&i| self.nodes[i].requires_grad);
        let (y, probs) = causal_attention_with_probs(self.data(q), self.data(k), self.data(v), &cfg, need);
        let shape = self.value(q).shape().to_vec();
        self.push(Tensor::from_parts(shape, y), Op::Attention { q, k, v, cfg, probs }, &[q, k, v])
    }

    /// Kernel-3 causal conv; `w` is `[3, c_in, c_out]`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        let ws = self.value(w).shape().to_vec();
        let (c_in, c_out) = (ws[1], ws[2]);
        let y = ops::causal_conv1d_unchecked(self.data(x), c_in, self.data(w), c_out, stride);
        let rows = y.len() / c_out;
        self.push(Tensor::from_parts(vec![rows, c_out], y), Op::Conv { x, w, c_in, c_out, stride }, &[x, w])
    }

    pub fn rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let d = xv.cols();
        let y = xv.data()[start * d..(start + len) * d].to_vec();
        self.push(Tensor::from_parts(vec![len, d], y), Op::Rows { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let y = self.value(x).clone().reshape(shape).expect("reshape: element count");
        self.push(y, Op::Reshape(x), &[x])
    }

    /// Row lookup; `None` yields a zero row.
    pub fn gather(&mut self, table: NodeId, ids: Vec<Option<usize>>) -> NodeId {
        let tv = self.value(table);
        let d = tv.cols();
        let mut y = vec![0.0; ids.len() * d];
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = id {
                y[r * d..(r + 1) * d].copy_from_slice(tv.row(*id));
            }
        }
        let rows = ids.len();
        self.push(Tensor::from_parts(vec![rows, d], y), Op::Gather { table, ids }, &[table])
    }

    /// Weighted mean cross-entropy plus `z_coeff · mean(log Z)²`.
    pub fn cross_entropy_z(&mut self, logits: NodeId, targets: Vec<usize>, weights: Vec<f32>, z_coeff: f32) -> (NodeId, LossParts) {
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), rows, "cross_entropy_z: targets");
        assert_eq!(weights.len(), rows, "cross_entropy_z: weights");
        let wsum: f32 = weights.iter().sum();
        let mut lse = Vec::with_capacity(rows);
        let (mut ce, mut z, mut abs) = (0.0f32, 0.0f32, 0.0f32);
        for r in 0..rows {
            let l = lv.row(r);
            let m = l.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let s: f32 = l.iter().map(|x| (x - m).exp()).sum();
            let log_z = m + s.ln();
            lse.push(log_z);
            ce += weights[r] * (log_z - l[targets[r]]);
            z += log_z * log_z;
            abs += log_z.abs();
        }
        let _ = v;
        let n = rows.max(1) as f32;
        let parts = LossParts {
            ce: ce / wsum.max(f32::MIN_POSITIVE),
            z: z / n,
            log_z_abs_mean: abs / n,
        };
        let total = parts.ce + z_coeff * parts.z;
        let id = self.push(
            Tensor::from_parts(vec![1], vec![total]),
            Op::CrossEntropy { logits, targets, weights, z_coeff, lse },
            &[logits],
        );
        (id, parts)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: NodeId) -> Grads {
        self.backward_seeded(root, Tensor::filled(self.value(root).shape(), 1.0))
    }

    /// Reverse pass seeding `d(loss)/d(root) = seed`, i.e. for the implicit
    /// scalar `sum(root · seed)`.
    pub fn backward_seeded(&self, root: NodeId, seed: Tensor) -> Grads {
        assert_eq!(seed.shape(), self.value(root).shape(), "backward seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(id, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        Grads { grads }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> &'g mut [f32] {
        let shape = self.nodes[id].value.shape();
        grads[id].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
    }

    fn backward_node(&self, id: NodeId, dy_t: &Tensor, grads: &mut [Option<Tensor>]) {
        let dy = dy_t.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Linear { x, w, d_in, d_out } => {
                if self.wants(x) {
                    let mut dx = std::mem::take(&mut grads[x]).unwrap_or_else(|| Tensor::zeros(self.value(x).shape()));
                    ops::linear_backward(self.data(x), self.data(w), dy, d_in, d_out, Some(dx.data_mut()), None);
                    grads[x] = Some(dx);
                }
                if self.wants(w) {
                    let mut dw = std::mem::take(&mut grads[w]).unwrap_or_else(|| Tensor::zeros(self.value(w).shape()));
                    ops::linear_backward(self.data(x), self.data(w), dy, d_in, d_out, None, Some(dw.data_mut()));
                    grads[w] = Some(dw);
                }
            }
            &Op::LinearTransposed { x, table } => {
                let (xv, tv) = (self.value(x), self.value(table));
                let (rows, d, v) = (xv.rows(), xv.cols(), tv.rows());
                if self.wants(x) {
                    let dx = self.acc(grads, x);
                    for r in 0..rows {
                        for o in 0..v {
                            ops::axpy(dy[r * v + o], tv.row(o), &mut dx[r * d..(r + 1) * d]);
                        }
                    }
                }
                if self.wants(table) {
                    let dt = self.acc(grads, table);
                    for r in 0..rows {
                        for o in 0..v {
                            ops::axpy(dy[r * v + o], xv.row(r), &mut dt[o * d..(o + 1) * d]);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for n in [a, b] {
                    if self.wants(n) {
                        for (g, d) in self.acc(grads, n).iter_mut().zip(dy) {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = self.data(b);
                    for ((g, d), o) in self.acc(grads, a).iter_mut().zip(dy).zip(bv) {
                        *g += d * o;
                    }
                }
                if self.wants(b) {
                    let av = self.data(a);
                    for ((g, d), o) in self.acc(grads, b).iter_mut().zip(dy).zip(av) {
                        *g += d * o;
                    }
                }
            }
            &Op::AddRow { x, row } => {
                let d = self.value(x).cols();
                if self.wants(x) {
                    for (g, dd) in self.acc(grads, x).iter_mut().zip(dy) {
                        *g += dd;
                    }
                }
                if self.wants(row) {
                    let dr = self.acc(grads, row);
                    for dyr in dy.chunks_exact(d) {
                        for (g, dd) in dr.iter_mut().zip(dyr) {
                            *g += dd;
                        }
                    }
                }
            }
            &Op::ScaleOnePlus { x, g } => {
                let d = self.value(x).cols();
                if self.wants(x) {
                    let gv = self.data(g);
                    let dx = self.acc(grads, x);
                    for (dxr, dyr) in dx.chunks_exact_mut(d).zip(dy.chunks_exact(d)) {
                        for i in 0..d {
                            dxr[i] += dyr[i] * (1.0 + gv[i]);
                        }
                    }
                }
                if self.wants(g) {
                    let xv = self.data(x);
                    let dg = self.acc(grads, g);
                    for (xr, dyr) in xv.chunks_exact(d).zip(dy.chunks_exact(d)) {
                        for i in 0..d {
                            dg[i] += dyr[i] * xr[i];
                        }
                    }
                }
            }
            &Op::RmsNorm { x, w, eps } => {
                let mut dx = self.wants(x).then(|| std::mem::take(&mut grads[x]).unwrap_or_else(|| Tensor::zeros(self.value(x).shape())));
                let mut dw = self.wants(w).then(|| std::mem::take(&mut grads[w]).unwrap_or_else(|| Tensor::zeros(self.value(w).shape())));
                ops::rms_norm_rows_backward(
                    self.data(x),
                    self.data(w),
                    eps,
                    dy,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                );
                if dx.is_some() {
                    grads[x] = dx;
                }
                if dw.is_some() {
                    grads[w] = dw;
                }
            }
            &Op::Silu(x) => {
                let xv = self.data(x);
                for ((g, d), v) in self.acc(grads, x).iter_mut().zip(dy).zip(xv) {
                    *g += d * ops::silu_grad(*v);
                }
            }
            &Op::Gelu(x) => {
                let xv = self.data(x);
                for ((g, d), v) in self.acc(grads, x).iter_mut().zip(dy).zip(xv) {
                    *g += d * ops::gelu_grad(*v);
                }
            }
            &Op::Rope { x, head_dim, start, theta } => {
                let freqs = rope_freqs(head_dim, theta);
                let d = self.value(x).cols();
                let dx = self.acc(grads, x);
                let mut tmp = vec![0.0; d];
                for (r, (dxr, dyr)) in dx.chunks_exact_mut(d).zip(dy.chunks_exact(d)).enumerate() {
                    tmp.copy_from_slice(dyr);
                    let (c, s) = rope_table(start + r, &freqs);
                    rope_rotate(&mut tmp, head_dim, &c, &s, -1.0);
                    for (a, b) in dxr.iter_mut().zip(&tmp) {
                        *a += b;
                    }
                }
            }
            Op::Attention { q, k, v, cfg, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let mut dq = vec![0.0; self.value(q).len()];
                let mut dk = vec![0.0; self.value(k).len()];
                let mut dv = vec![0.0; self.value(v).len()];
                causal_attention_backward(self.data(q), self.data(k), self.data(v), cfg, probs, dy, &mut dq, &mut dk, &mut dv);
                for (n, d) in [(q, dq), (k, dk), (v, dv)] {
                    if self.wants(n) {
                        for (g, x) in self.acc(grads, n).iter_mut().zip(&d) {
                            *g += x;
                        }
                    }
                }
            }
            &Op::Conv { x, w, c_in, c_out, stride } => {
                let mut dx = self.wants(x).then(|| std::mem::take(&mut grads[x]).unwrap_or_else(|| Tensor::zeros(self.value(x).shape())));
                let mut dw = self.wants(w).then(|| std::mem::take(&mut grads[w]).unwrap_or_else(|| Tensor::zeros(self.value(w).shape())));
                ops::causal_conv1d_backward(
                    self.data(x),
                    c_in,
                    self.data(w),
                    c_out,
                    stride,
                    dy,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                );
                if dx.is_some() {
                    grads[x] = dx;
                }
                if dw.is_some() {
                    grads[w] = dw;
                }
            }
            &Op::Rows { x, start } => {
                let d = self.value(x).cols();
                let dx = self.acc(grads, x);
                for (g, dd) in dx[start * d..start * d + dy.len()].iter_mut().zip(dy) {
                    *g += dd;
                }
            }
            &Op::Reshape(x) => {
                for (g, d) in self.acc(grads, x).iter_mut().zip(dy) {
                    *g += d;
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let d = self.value(table).cols();
                let dt = self.acc(grads, table);
                for (r, id) in ids.iter().enumerate() {
                    if let Some(id) = id {
                        for (g, dd) in dt[id * d..(id + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                            *g += dd;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, z_coeff, lse } => {
                let logits = *logits;
                let lv = self.value(logits);
                let (rows, v) = (lv.rows(), lv.cols());
                let wsum: f32 = weights.iter().sum::<f32>().max(f32::MIN_POSITIVE);
                let n = rows.max(1) as f32;
                let scale = dy[0];
                let mut out = vec![0.0; rows * v];
                for r in 0..rows {
                    let l = lv.row(r);
                    let ce_w = weights[r] / wsum;
                    let z_w = 2.0 * z_coeff * lse[r] / n;
                    for o in 0..v {
                        let p = (l[o] - lse[r]).exp();
                        out[r * v + o] = scale * (ce_w + z_w) * p;
                    }
                    out[r * v + targets[r]] -= scale * ce_w;
                }
                for (g, d) in self.acc(grads, logits).iter_mut().zip(&out) {
                    *g += d;
                }
            }
        }
    }
}
