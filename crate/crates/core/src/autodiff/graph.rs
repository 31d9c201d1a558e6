//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is also a valid
//! topological order; `backward` walks them in exact reverse. Gradients for
//! parameter leaves can be skipped per axis-0 row (one row per neuron), in
//! which case the corresponding weight-gradient kernels are not executed at
//! all and the FLOP counters in [`BackwardStats`] reflect the reduced work.

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rows of a leaf whose gradient must not be computed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RowSkip {
    All,
    /// `true` marks a skipped row.
    Rows(Vec<bool>),
}

/// Set of parameter leaves (or rows of them) excluded from backward.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GradSkip {
    entries: BTreeMap<NodeId, RowSkip>,
}

impl GradSkip {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn tensors(ids: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            entries: ids.into_iter().map(|id| (id, RowSkip::All)).collect(),
        }
    }

    pub fn skip_tensor(&mut self, id: NodeId) {
        self.entries.insert(id, RowSkip::All);
    }

    /// Marks `row` of the leaf `id` (which has `rows` rows) as skipped.
    pub fn skip_row(&mut self, id: NodeId, row: usize, rows: usize) {
        let entry = self
            .entries
            .entry(id)
            .or_insert_with(|| RowSkip::Rows(vec![false; rows]));
        if let RowSkip::Rows(mask) = entry {
            mask[row] = true;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(&self, id: NodeId) -> Option<&RowSkip> {
        self.entries.get(&id)
    }
}

/// FLOPs executed by one backward pass, split the same way as the ledger.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Kernels producing gradients of parameter leaves.
    pub weight_flops: u64,
    /// Kernels propagating gradients into intermediate activations.
    pub input_flops: u64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, k: NodeId },
    ChannelBias { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    Reshape { x: NodeId },
    Square { x: NodeId },
    Sum { x: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Conv2d { x, k } => vec![*x, *k],
            Op::ChannelBias { x, b } => vec![*x, *b],
            Op::Relu { x } | Op::Reshape { x } | Op::Square { x } | Op::Sum { x } => vec![*x],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    forward_flops: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs spent by the layer-type ops (matmul, linear, conv, bias, relu)
    /// recorded so far. Loss and reduction heads are not counted.
    pub fn forward_flops(&self) -> u64 {
        self.forward_flops
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient stored on a leaf by the last `backward` call.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        Ok(self.push(op, value))
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Index(format!("node {} not in graph", id.0)))
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k1], [k2, n]) if k1 == k2 => (*m, *k1, *n),
            (sa, sb) => {
                return Err(Error::Dimension(format!(
                    "matmul needs [m,k]x[k,n], got {sa:?} x {sb:?}"
                )))
            }
        };
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        self.forward_flops += 2 * (m * k * n) as u64;
        let t = Tensor::new(&[m, n], out)?;
        self.push_checked(Op::MatMul { a, b }, t, "matmul")
    }

    /// Dense layer `x · wᵀ + b` with `w` laid out one row per output unit.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        for id in [x, w, b] {
            self.check_id(id)?;
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, inputs, outputs) = match (xv.shape(), wv.shape(), bv.shape()) {
            ([n, i1], [o, i2], [o2]) if i1 == i2 && o == o2 => (*n, *i1, *o),
            (sx, sw, sb) => {
                return Err(Error::Dimension(format!(
                    "linear needs x[n,in], w[out,in], b[out], got {sx:?}, {sw:?}, {sb:?}"
                )))
            }
        };
        let out = kernels::linear(xv.data(), wv.data(), bv.data(), batch, inputs, outputs);
        self.forward_flops += (2 * batch * inputs * outputs + batch * outputs) as u64;
        let t = Tensor::new(&[batch, outputs], out)?;
        self.push_checked(Op::Linear { x, w, b }, t, "linear")
    }

    /// 3x3 cross-correlation, stride 1, no padding.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(k)?;
        let (xv, kv) = (self.value(x), self.value(k));
        let geom = match (xv.shape(), kv.shape()) {
            ([n, c, h, w], [f, c2, 3, 3]) if c == c2 => {
                if *h < 3 || *w < 3 {
                    return Err(Error::Dimension(format!(
                        "conv2d input {:?} is smaller than the 3x3 kernel",
                        xv.shape()
                    )));
                }
                kernels::ConvGeom {
                    batch: *n,
                    channels: *c,
                    height: *h,
                    width: *w,
                    filters: *f,
                }
            }
            (sx, sk) => {
                return Err(Error::Dimension(format!(
                    "conv2d needs x[n,c,h,w], k[f,c,3,3], got {sx:?}, {sk:?}"
                )))
            }
        };
        let out = kernels::conv2d(xv.data(), kv.data(), &geom);
        self.forward_flops += geom.mac_flops();
        let t = Tensor::new(
            &[geom.batch, geom.filters, geom.out_h(), geom.out_w()],
            out,
        )?;
        self.push_checked(Op::Conv2d { x, k }, t, "conv2d")
    }

    /// Adds `b[c]` to every element of channel `c` of an `[n, c, ...]` tensor.
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(b)?;
        let (xv, bv) = (self.value(x), self.value(b));
        let xs = xv.shape();
        if xs.len() < 2 || bv.shape() != [xs[1]] {
            return Err(Error::Dimension(format!(
                "channel_bias needs x[n,c,...] and b[c], got {xs:?}, {:?}",
                bv.shape()
            )));
        }
        let plane = xs[2..].iter().product::<usize>();
        let out = kernels::channel_bias(xv.data(), bv.data(), xs[0], xs[1], plane);
        let t = Tensor::new(xs, out)?;
        self.forward_flops += t.len() as u64;
        self.push_checked(Op::ChannelBias { x, b }, t, "channel_bias")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(xv.shape(), out)?;
        self.forward_flops += t.len() as u64;
        self.push_checked(Op::Relu { x }, t, "relu")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check_id(x)?;
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, t))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v * v).collect();
        let t = Tensor::new(xv.shape(), out)?;
        self.push_checked(Op::Square { x }, t, "square")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let s = self.value(x).data().iter().sum();
        self.push_checked(Op::Sum { x }, Tensor::scalar(s), "sum")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check_id(logits)?;
        let lv = self.value(logits);
        let (n, k) = match lv.shape() {
            [n, k] if *n == labels.len() => (*n, *k),
            s => {
                return Err(Error::Dimension(format!(
                    "softmax_cross_entropy needs logits[n,k] with n = {} labels, got {s:?}",
                    labels.len()
                )))
            }
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let (loss, probs) = kernels::softmax_cross_entropy(lv.data(), labels, n, k);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push_checked(op, Tensor::scalar(loss), "softmax_cross_entropy")
    }

    /// Which nodes carry gradient towards a non-skipped parameter.
    fn activity(&self, skip: &GradSkip) -> Result<Vec<bool>> {
        let mut active = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let a = match &node.op {
                Op::Leaf => {
                    let v = &node.value;
                    match skip.get(NodeId(i)) {
                        None => v.requires_grad(),
                        Some(RowSkip::All) => false,
                        Some(RowSkip::Rows(rows)) => {
                            if rows.len() != v.rows() {
                                return Err(Error::Contract(format!(
                                    "skip mask for node {i} has {} rows, tensor has {}",
                                    rows.len(),
                                    v.rows()
                                )));
                            }
                            v.requires_grad() && rows.iter().any(|s| !s)
                        }
                    }
                }
                op => op.inputs().iter().any(|j| active[j.0]),
            };
            active.push(a);
        }
        Ok(active)
    }

    /// Per-row filter used when writing a gradient into `id`: `None` means
    /// every row, otherwise `Some(mask)` with `true` for rows to compute.
    fn row_filter(&self, id: NodeId, skip: &GradSkip) -> Option<Vec<bool>> {
        match (&self.nodes[id.0].op, skip.get(id)) {
            (Op::Leaf, Some(RowSkip::Rows(rows))) => Some(rows.iter().map(|s| !s).collect()),
            _ => None,
        }
    }

    fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Reverse-mode pass from the scalar `loss`. Every leaf that requires a
    /// gradient ends up with one; skipped leaves and skipped rows hold exact
    /// zeros and their kernels are never run.
    pub fn backward(&mut self, loss: NodeId, skip: &GradSkip) -> Result<BackwardStats> {
        self.check_id(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let active = self.activity(skip)?;
        let mut stats = BackwardStats::default();
        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        upstream[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !active[idx] {
                continue;
            }
            let Some(dy) = upstream[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    if self.nodes[idx].value.requires_grad() {
                        self.nodes[idx].value.set_grad(dy);
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                    let n = self.value(b).shape()[1];
                    if active[a.0] {
                        let rows = self.row_filter(a, skip);
                        let mut buf = take_buf(&mut upstream, a, m * k);
                        let f = kernels::matmul_grad_a(&dy, self.value(b).data(), m, k, n, rows.as_deref(), &mut buf);
                        upstream[a.0] = Some(buf);
                        self.book(&mut stats, a, f);
                    }
                    if active[b.0] {
                        let rows = self.row_filter(b, skip);
                        let mut buf = take_buf(&mut upstream, b, k * n);
                        let f = kernels::matmul_grad_b(self.value(a).data(), &dy, m, k, n, rows.as_deref(), &mut buf);
                        upstream[b.0] = Some(buf);
                        self.book(&mut stats, b, f);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (batch, inputs) = (self.value(x).shape()[0], self.value(x).shape()[1]);
                    let outputs = self.value(w).shape()[0];
                    if active[w.0] {
                        let rows = self.row_filter(w, skip);
                        let mut buf = take_buf(&mut upstream, w, outputs * inputs);
                        let f = kernels::linear_grad_w(&dy, self.value(x).data(), batch, inputs, outputs, rows.as_deref(), &mut buf);
                        upstream[w.0] = Some(buf);
                        self.book(&mut stats, w, f);
                    }
                    if active[b.0] {
                        let rows = self.row_filter(b, skip);
                        let mut buf = take_buf(&mut upstream, b, outputs);
                        let f = kernels::bias_grad(&dy, batch, outputs, 1, rows.as_deref(), &mut buf);
                        upstream[b.0] = Some(buf);
                        self.book(&mut stats, b, f);
                    }
                    if active[x.0] {
                        let rows = self.row_filter(x, skip);
                        let mut buf = take_buf(&mut upstream, x, batch * inputs);
                        let f = kernels::linear_grad_x(&dy, self.value(w).data(), batch, inputs, outputs, rows.as_deref(), &mut buf);
                        upstream[x.0] = Some(buf);
                        self.book(&mut stats, x, f);
                    }
                }
                Op::Conv2d { x, k } => {
                    let s = self.value(x).shape();
                    let geom = kernels::ConvGeom {
                        batch: s[0],
                        channels: s[1],
                        height: s[2],
                        width: s[3],
                        filters: self.value(k).shape()[0],
                    };
                    if active[k.0] {
                        let rows = self.row_filter(k, skip);
                        let mut buf = take_buf(&mut upstream, k, self.value(k).len());
                        let f = kernels::conv2d_grad_k(&dy, self.value(x).data(), &geom, rows.as_deref(), &mut buf);
                        upstream[k.0] = Some(buf);
                        self.book(&mut stats, k, f);
                    }
                    if active[x.0] {
                        let rows = self.row_filter(x, skip);
                        let mut buf = take_buf(&mut upstream, x, self.value(x).len());
                        let f = kernels::conv2d_grad_x(&dy, self.value(k).data(), &geom, rows.as_deref(), &mut buf);
                        upstream[x.0] = Some(buf);
                        self.book(&mut stats, x, f);
                    }
                }
                Op::ChannelBias { x, b } => {
                    let s = self.value(x).shape();
                    let (n, c) = (s[0], s[1]);
                    let plane = s[2..].iter().product::<usize>();
                    if active[b.0] {
                        let rows = self.row_filter(b, skip);
                        let mut buf = take_buf(&mut upstream, b, c);
                        let f = kernels::bias_grad(&dy, n, c, plane, rows.as_deref(), &mut buf);
                        upstream[b.0] = Some(buf);
                        self.book(&mut stats, b, f);
                    }
                    if active[x.0] {
                        let rows = self.row_filter(x, skip);
                        let len = self.value(x).len();
                        let mut buf = take_buf(&mut upstream, x, len);
                        let row_len = len / n;
                        kernels::accumulate_rows(&dy, row_len, rows.as_deref(), &mut buf);
                        upstream[x.0] = Some(buf);
                    }
                }
                Op::Relu { x } => {
                    let rows = self.row_filter(x, skip);
                    let xv = self.value(x);
                    let row_len = xv.row_len();
                    let mut buf = take_buf(&mut upstream, x, xv.len());
                    let f = kernels::relu_grad(&dy, xv.data(), row_len, rows.as_deref(), &mut buf);
                    upstream[x.0] = Some(buf);
                    self.book(&mut stats, x, f);
                }
                Op::Reshape { x } => {
                    let rows = self.row_filter(x, skip);
                    let xv = self.value(x);
                    let row_len = xv.row_len();
                    let mut buf = take_buf(&mut upstream, x, xv.len());
                    kernels::accumulate_rows(&dy, row_len, rows.as_deref(), &mut buf);
                    upstream[x.0] = Some(buf);
                }
                Op::Square { x } => {
                    let rows = self.row_filter(x, skip);
                    let xv = self.value(x);
                    let row_len = xv.row_len();
                    let mut buf = take_buf(&mut upstream, x, xv.len());
                    for (i, (g, v)) in dy.iter().zip(xv.data()).enumerate() {
                        if row_on(rows.as_deref(), i / row_len) {
                            buf[i] += 2.0 * v * g;
                        }
                    }
                    upstream[x.0] = Some(buf);
                }
                Op::Sum { x } => {
                    let rows = self.row_filter(x, skip);
                    let xv = self.value(x);
                    let row_len = xv.row_len();
                    let mut buf = take_buf(&mut upstream, x, xv.len());
                    for (i, slot) in buf.iter_mut().enumerate() {
                        if row_on(rows.as_deref(), i / row_len) {
                            *slot += dy[0];
                        }
                    }
                    upstream[x.0] = Some(buf);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let rows = self.row_filter(logits, skip);
                    let k = self.value(logits).shape()[1];
                    let mut buf = take_buf(&mut upstream, logits, probs.len());
                    kernels::softmax_cross_entropy_grad(&probs, &labels, k, dy[0], rows.as_deref(), &mut buf);
                    upstream[logits.0] = Some(buf);
                }
            }
        }

        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                match node.value.grad() {
                    Some(g) => {
                        if !g.iter().all(|v| v.is_finite()) {
                            return Err(Error::NonFinite { op: "backward" });
                        }
                    }
                    None => {
                        let zeros = vec![0.0; node.value.len()];
                        node.value.set_grad(zeros);
                    }
                }
            }
        }
        Ok(stats)
    }

    fn book(&self, stats: &mut BackwardStats, target: NodeId, flops: u64) {
        if self.is_leaf(target) {
            stats.weight_flops += flops;
        } else {
            stats.input_flops += flops;
        }
    }
}

fn take_buf(upstream: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> Vec<f64> {
    upstream[id.0].take().unwrap_or_else(|| vec![0.0; len])
}

fn row_on(rows: Option<&[bool]>, r: usize) -> bool {
    rows.is_none_or(|m| m[r])
}
