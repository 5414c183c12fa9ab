//! Reverse-mode automatic differentiation over an append-only op graph.
//!
//! Nodes are recorded in topological order and evaluated eagerly; `backward`
//! replays the graph in reverse, expressing every vector-Jacobian product as
//! ordinary graph ops. Because the backward pass is itself recorded, a second
//! `backward` over a gradient node yields second-order derivatives, which is
//! what the MAML-family outer updates differentiate through.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input, parameter or detached constant.
    Leaf,
    /// `a @ b` for rank-2 operands.
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Element-wise product.
    Mul(NodeId, NodeId),
    /// Product with a compile-time constant scalar.
    Scale(NodeId, f64),
    /// `[m,n] + [1,n]`, the bias broadcast of a linear layer.
    AddBias(NodeId, NodeId),
    /// `[m,n] -> [1,n]` column sums.
    SumRows(NodeId),
    /// `[1,n] -> [m,n]`.
    BroadcastRows(NodeId, usize),
    /// Any shape -> scalar `[1]`.
    SumAll(NodeId),
    /// Scalar `[1]` -> given shape.
    BroadcastTo(NodeId, Vec<usize>),
    Relu(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    /// Softmax over a single row (`[n]` or `[1,n]`).
    Softmax(NodeId),
    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    ConcatCols(Vec<NodeId>),
    /// Columns `start .. start+len` of a rank-2 tensor.
    SliceCols { input: NodeId, start: usize, len: usize },
    /// Embed a rank-2 tensor into `total` columns of zeros at `start`.
    PadCols { input: NodeId, start: usize, total: usize },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::SumAll(a)
            | Op::BroadcastTo(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::SliceCols { input: a, .. }
            | Op::PadCols { input: a, .. } => vec![*a],
            Op::ConcatCols(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph with cached forward values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// While set, newly created nodes never require grad. Used to record a
    /// backward pass whose results must behave as constants (first-order
    /// mode: inner gradients treated as plain values).
    detach_new: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = !self.detach_new
            && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients flow into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let requires_grad = !self.detach_new;
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf: inputs, data batches, detached values.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Copy of the node's current value as a fresh constant leaf
    /// (the stop-gradient of the meta-loss).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.nodes[id.0].value.clone();
        self.constant(value)
    }

    // ── shape checks ────────────────────────────────────────────────

    fn want_rank2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op, detail: format!("expected rank 2, got {:?}", s) });
        }
        Ok((s[0], s[1]))
    }

    fn want_same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    // ── ops ─────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.want_rank2(a, "matmul")?;
        let (k2, n) = self.want_rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("[{},{}] @ [{},{}]", m, k, k2, n),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], c)?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.want_rank2(a, "transpose")?;
        let av = self.value(a).data();
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = av[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], t)?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * c).collect::<Vec<_>>();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.want_rank2(a, "add_bias")?;
        let (bm, bn) = self.want_rank2(b, "add_bias")?;
        if bm != 1 || bn != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("[{},{}] + [{},{}]", m, n, bm, bn),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::AddBias(a, b), value))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.want_rank2(a, "sum_rows")?;
        let av = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += av[i * n + j];
            }
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.push(Op::SumRows(a), value))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, m: usize) -> Result<NodeId> {
        let (am, n) = self.want_rank2(a, "broadcast_rows")?;
        if am != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                detail: format!("expected [1,n], got [{},{}]", am, n),
            });
        }
        let row = self.value(a).data().to_vec();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&row);
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::BroadcastRows(a, m), value))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !self.value(a).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                detail: format!("expected scalar, got {:?}", self.value(a).shape()),
            });
        }
        let v = self.value(a).item();
        let numel: usize = shape.iter().product();
        let value = Tensor::new(shape.to_vec(), vec![v; numel])?;
        Ok(self.push(Op::BroadcastTo(a, shape.to_vec()), value))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect::<Vec<_>>();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect::<Vec<_>>();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(Op::Tanh(a), value)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * x).collect::<Vec<_>>();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        self.push(Op::Square(a), value)
    }

    /// Softmax over a single row; the input must be `[n]` or `[1,n]`.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        let ok = shape.len() == 1 || (shape.len() == 2 && shape[0] == 1);
        if !ok || self.value(a).numel() == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: format!("expected a single row, got {:?}", shape),
            });
        }
        let x = self.value(a).data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let data = exps.into_iter().map(|e| e / z).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Softmax(a), value))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyBatch("concat_cols"));
        }
        let (m, _) = self.want_rank2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.want_rank2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", m, pm),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.want_rank2(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice {}..{} out of {} columns", start, start + len, n),
            });
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        Ok(self.push(Op::SliceCols { input: a, start, len }, value))
    }

    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let (m, n) = self.want_rank2(a, "pad_cols")?;
        if start + n > total {
            return Err(Error::ShapeMismatch {
                op: "pad_cols",
                detail: format!("{} columns at offset {} exceed {}", n, start, total),
            });
        }
        let av = self.value(a).data();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            out[i * total + start..i * total + start + n].copy_from_slice(&av[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![m, total], out)?;
        Ok(self.push(Op::PadCols { input: a, start, total }, value))
    }

    // ── composites ──────────────────────────────────────────────────

    /// Mean over all elements, as a scalar node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of squares of all elements (squared L2 norm), as a scalar node.
    pub fn norm_sq(&mut self, a: NodeId) -> NodeId {
        let sq = self.square(a);
        self.sum_all(sq)
    }

    /// `<a, b>` over all elements, as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        Ok(self.sum_all(p))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `out` with respect to `wrt`.
    ///
    /// The returned handles are graph nodes. With `create_graph` the backward
    /// ops participate in further differentiation, so calling `backward` on a
    /// result yields second-order derivatives. Without it the results are
    /// recorded as detached constants (values are identical either way).
    pub fn backward(
        &mut self,
        out: NodeId,
        wrt: &[NodeId],
        create_graph: bool,
    ) -> Result<Vec<NodeId>> {
        let out_val = self.value(out);
        if !out_val.is_scalar() {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        if !out_val.item().is_finite() {
            return Err(Error::NonFinite { context: "backward output".to_string() });
        }

        let saved_detach = self.detach_new;
        self.detach_new = !create_graph;
        let result = self.backward_inner(out, wrt);
        self.detach_new = saved_detach;
        result
    }

    fn backward_inner(&mut self, out: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let mut grads: Vec<Option<NodeId>> = vec![None; out.0 + 1];
        let seed = self.constant(Tensor::scalar(1.0));
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let g = match grads[idx] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let bt = self.transpose(b)?;
                        let ga = self.matmul(g, bt)?;
                        Self::accumulate(self, &mut grads, a, ga)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = self.transpose(a)?;
                        let gb = self.matmul(at, g)?;
                        Self::accumulate(self, &mut grads, b, gb)?;
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g)?;
                    Self::accumulate(self, &mut grads, a, ga)?;
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        Self::accumulate(self, &mut grads, a, g)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        Self::accumulate(self, &mut grads, b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        Self::accumulate(self, &mut grads, a, g)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = self.scale(g, -1.0);
                        Self::accumulate(self, &mut grads, b, gb)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = self.mul(g, b)?;
                        Self::accumulate(self, &mut grads, a, ga)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = self.mul(g, a)?;
                        Self::accumulate(self, &mut grads, b, gb)?;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    Self::accumulate(self, &mut grads, a, ga)?;
                }
                Op::AddBias(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        Self::accumulate(self, &mut grads, a, g)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = self.sum_rows(g)?;
                        Self::accumulate(self, &mut grads, b, gb)?;
                    }
                }
                Op::SumRows(a) => {
                    let m = self.value(a).rows();
                    let ga = self.broadcast_rows(g, m)?;
                    Self::accumulate(self, &mut grads, a, ga)?;
                }
                Op::BroadcastRows(a, m) => {
                    debug_assert_eq!(self.value(NodeId(idx)).rows(), m);
                    let ga = self.sum_rows(g)?;
                    Self::accumulate(self, &mut grads, a, ga)?;
                }
                Op::SumAll(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let ga = self.broadcast_to(g, &shape)?;
                    Self::accumulate(self, &mut grads, a, ga)?;
                }
                Op::BroadcastTo(a, shape) => {
                    debug_assert_eq!(self.value(NodeId(idx)).shape(), &shape[..]);
                    let ga = self.sum_all(g);
                    Self::accumulate(self, &mut grads, a, ga)?;
                }
                Op::Relu(a) => {
                    // relu'' = 0 a.e., so the 0/1 mask enters as a constant.
                    let mask: Vec<f64> =
                        self.value(a).data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
                    let shape = self.value(a).shape().to_vec();
                    let mask = self.constant(Tensor::new(shape, mask)?);
                    let ga = self.mul(g, mask)?;
                    Self::accumulate(self, &mut grads, a, ga)?;
                }
                Op::Tanh(a) => {
                    // d tanh = 1 - y^2, kept differentiable through y.
                    let y = NodeId(idx);
                    let ones = self.constant(Tensor::ones(self.value(a).shape()));
                    let y2 = self.square(y);
                    let d = self.sub(ones, y2)?;
                    let ga = self.mul(g, d)?;
                    Self::accumulate(self, &mut grads, a, ga)?;
                }
                Op::Square(a) => {
                    let two_a = self.scale(a, 2.0);
                    let ga = self.mul(g, two_a)?;
                    Self::accumulate(self, &mut grads, a, ga)?;
                }
                Op::Softmax(a) => {
                    // d x = y * (g - <g, y>)
                    let y = NodeId(idx);
                    let gy = self.mul(g, y)?;
                    let dot = self.sum_all(gy);
                    let shape = self.value(a).shape().to_vec();
                    let dot_b = self.broadcast_to(dot, &shape)?;
                    let centered = self.sub(g, dot_b)?;
                    let ga = self.mul(y, centered)?;
                    Self::accumulate(self, &mut grads, a, ga)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in &parts {
                        let w = self.value(p).cols();
                        if self.nodes[p.0].requires_grad {
                            let gp = self.slice_cols(g, offset, w)?;
                            Self::accumulate(self, &mut grads, p, gp)?;
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { input, start, len } => {
                    debug_assert_eq!(self.value(NodeId(idx)).cols(), len);
                    let total = self.value(input).cols();
                    let ga = self.pad_cols(g, start, total)?;
                    Self::accumulate(self, &mut grads, input, ga)?;
                }
                Op::PadCols { input, start, total } => {
                    debug_assert_eq!(self.value(NodeId(idx)).cols(), total);
                    let len = self.value(input).cols();
                    let ga = self.slice_cols(g, start, len)?;
                    Self::accumulate(self, &mut grads, input, ga)?;
                }
            }
        }

        wrt.iter()
            .map(|p| grads.get(p.0).copied().flatten().ok_or(Error::DetachedParameter(p.0)))
            .collect()
    }

    fn accumulate(
        graph: &mut Graph,
        grads: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        grads[target.0] = Some(match grads[target.0] {
            None => contribution,
            Some(prev) => graph.add(prev, contribution)?,
        });
        Ok(())
    }

    /// Gradient values of a scalar `out` with respect to `wrt`, without
    /// keeping graph handles around.
    pub fn grad_values(&mut self, out: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let ids = self.backward(out, wrt, false)?;
        Ok(ids.into_iter().map(|id| self.value(id).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn identity_graph_passes_values_through() {
        let mut g = Graph::new();
        let x = g.constant(t1(&[1.0, 2.0, 3.0]));
        assert_eq!(g.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_forward_matches_definition() {
        let mut g = Graph::new();
        let x = g.constant(t1(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn one_layer_mlp_forward_by_hand() {
        // Linear 2 -> 1, weights all ones, bias zero, input [1,1] -> [2].
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let h = g.matmul(x, w).unwrap();
        let y = g.add_bias(h, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
    }

    #[test]
    fn grad_of_square_is_two_x() {
        // f(x) = x^2 at x = 3 -> 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.grad_values(y, &[x]).unwrap();
        assert_eq!(grads[0].item(), 6.0);
    }

    #[test]
    fn second_derivative_of_square_is_two() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.7));
        let y = g.square(x);
        let dy = g.backward(y, &[x], true).unwrap()[0];
        let d2y = g.grad_values(dy, &[x]).unwrap();
        assert_eq!(d2y[0].item(), 2.0);
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut g = Graph::new();
        let x = g.leaf(t1(&[1.0, 2.0]));
        let y = g.square(x);
        match g.backward(y, &[x], false) {
            Err(Error::NonScalarOutput(s)) => assert_eq!(s, vec![2]),
            other => panic!("expected NonScalarOutput, got {:?}", other),
        }
    }

    #[test]
    fn backward_rejects_detached_parameter() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let p = g.leaf(Tensor::scalar(5.0)); // never used
        let y = g.square(x);
        assert!(matches!(g.backward(y, &[p], false), Err(Error::DetachedParameter(_))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn softmax_row_sums_to_one_and_handles_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1000.0, 1001.0, 999.0]));
        let y = g.softmax(x).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice_cols(c, 0, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap(); // y = x * const(2)
        let grads = g.grad_values(y, &[x]).unwrap();
        assert_eq!(grads[0].item(), 2.0); // not 2x = 4
    }

    #[test]
    fn first_order_backward_detaches_results() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.square(x);
        let dy = g.backward(y, &[x], false).unwrap()[0];
        assert!(!g.requires_grad(dy));
        // with create_graph the gradient node stays differentiable
        let dy2 = g.backward(y, &[x], true).unwrap()[0];
        assert!(g.requires_grad(dy2));
    }
}
