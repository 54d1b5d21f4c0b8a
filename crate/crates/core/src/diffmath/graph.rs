use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{axis_split, broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};
use crate::error::{Error, Result};

/// Stable identifier of a bound graph input (a model parameter or a data slot).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type Bindings = BTreeMap<ParamId, Tensor>;
pub type Gradients = BTreeMap<ParamId, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Input {
        id: ParamId,
        requires_grad: bool,
    },
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    Sum(NodeId),
    SumAxis {
        x: NodeId,
        axis: usize,
        keepdim: bool,
    },
    LogSumExp {
        x: NodeId,
        axis: usize,
        keepdim: bool,
    },
    SliceRows {
        x: NodeId,
        start: usize,
        end: usize,
    },
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId, Vec<usize>),
    PairwiseSqDist(NodeId, NodeId),
    Detach(NodeId),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input { .. } | Const(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | PairwiseSqDist(a, b) => {
                vec![*a, *b]
            }
            Neg(a)
            | Scale(a, _)
            | AddScalar(a, _)
            | Transpose(a)
            | Exp(a)
            | Log(a)
            | Relu(a)
            | Square(a)
            | Softmax(a, _)
            | LogSoftmax(a, _)
            | Sum(a)
            | Reshape(a, _)
            | Detach(a) => {
                vec![*a]
            }
            SumAxis { x, .. } | LogSumExp { x, .. } | SliceRows { x, .. } => vec![*x],
            ConcatRows(xs) => xs.clone(),
        }
    }
}

/// Append-only reverse-mode computation graph.
///
/// Nodes are created through builder methods and always reference earlier
/// nodes, so the insertion order is a topological order. Leaves are either
/// constants or inputs bound at evaluation time.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

/// Forward values of every node for one set of bindings.
#[derive(Clone, Debug)]
pub struct Trace {
    values: Vec<Tensor>,
}

impl Trace {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn scalar(&self, node: NodeId) -> f64 {
        self.values[node.0].data()[0]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let needs = match &op {
            Op::Input { requires_grad, .. } => *requires_grad,
            Op::Const(_) | Op::Detach(_) => false,
            other => other.parents().iter().any(|p| self.needs_grad[p.0]),
        };
        self.ops.push(op);
        self.needs_grad.push(needs);
        NodeId(self.ops.len() - 1)
    }

    pub fn input(&mut self, id: ParamId, requires_grad: bool) -> NodeId {
        self.push(Op::Input { id, requires_grad })
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.input(id, true)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::Softmax(a, axis))
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::LogSoftmax(a, axis))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId, count: usize) -> NodeId {
        let s = self.sum(a);
        self.scale(s, 1.0 / count as f64)
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize, keepdim: bool) -> NodeId {
        self.push(Op::SumAxis { x, axis, keepdim })
    }

    pub fn logsumexp(&mut self, x: NodeId, axis: usize, keepdim: bool) -> NodeId {
        self.push(Op::LogSumExp { x, axis, keepdim })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceRows { x, start, end })
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::ConcatRows(xs.to_vec()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(x, shape))
    }

    /// `C[i, j] = ‖x_i − y_j‖²` for row sets `x` (n×d) and `y` (m×d).
    pub fn pairwise_sq_dist(&mut self, x: NodeId, y: NodeId) -> NodeId {
        self.push(Op::PairwiseSqDist(x, y))
    }

    /// Passes the value through and blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Detach(x))
    }

    /// Ids of every input leaf, with their requires-grad flag.
    pub fn inputs(&self) -> Vec<(ParamId, bool)> {
        let mut out: Vec<(ParamId, bool)> = vec![];
        for op in &self.ops {
            if let Op::Input { id, requires_grad } = op {
                if let Some(e) = out.iter_mut().find(|(i, _)| i == id) {
                    e.1 |= *requires_grad;
                } else {
                    out.push((*id, *requires_grad));
                }
            }
        }
        out
    }

    /// Forward pass over the whole graph.
    pub fn forward(&self, bindings: &Bindings) -> Result<Trace> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = eval_op(i, op, &values, bindings)?;
            if !v.is_finite() {
                return Err(Error::NonFinite { node: i });
            }
            values.push(v);
        }
        Ok(Trace { values })
    }

    /// Forward pass returning the value of `output`.
    pub fn evaluate(&self, bindings: &Bindings, output: NodeId) -> Result<Tensor> {
        Ok(self.forward(bindings)?.values.swap_remove(output.0))
    }

    /// Gradient of the scalar `output` with respect to every requires-grad input.
    ///
    /// Inputs with no path to `output` (or reached only through detached
    /// nodes) receive zero gradients.
    pub fn backward(&self, trace: &Trace, output: NodeId) -> Result<Gradients> {
        let out_val = &trace.values[output.0];
        if out_val.numel() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut grads = Gradients::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Input {
                id,
                requires_grad: true,
            } = op
            {
                grads
                    .entry(*id)
                    .or_insert_with(|| Tensor::zeros(trace.values[i].shape()));
            }
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::full(out_val.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            self.propagate(i, g, trace, &mut adj, &mut grads);
        }
        Ok(grads)
    }

    /// Forward and backward in one call, returning the output value and gradients.
    pub fn value_and_grad(&self, bindings: &Bindings, output: NodeId) -> Result<(f64, Gradients)> {
        let trace = self.forward(bindings)?;
        let grads = self.backward(&trace, output)?;
        Ok((trace.scalar(output), grads))
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor,
        trace: &Trace,
        adj: &mut [Option<Tensor>],
        grads: &mut Gradients,
    ) {
        let vals = &trace.values;
        let y = &vals[i];
        let send = |adj: &mut [Option<Tensor>], p: NodeId, t: Tensor| {
            if !self.needs_grad[p.0] {
                return;
            }
            match &mut adj[p.0] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, b)| *a += b),
                slot => *slot = Some(t),
            }
        };
        match &self.ops[i] {
            Op::Input { id, .. } => {
                let acc = grads.get_mut(id).expect("input registered");
                acc.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
            Op::Const(_) | Op::Detach(_) => {}
            Op::Add(a, b) => {
                send(adj, *a, reduce_to(&g, vals[a.0].shape()));
                send(adj, *b, reduce_to(&g, vals[b.0].shape()));
            }
            Op::Sub(a, b) => {
                send(adj, *a, reduce_to(&g, vals[a.0].shape()));
                send(adj, *b, reduce_to(&g, vals[b.0].shape()).map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&vals[a.0], &vals[b.0]);
                if self.needs_grad[a.0] {
                    send(
                        adj,
                        *a,
                        reduce_to(&zip_broadcast(&g, vb, |x, y| x * y), va.shape()),
                    );
                }
                if self.needs_grad[b.0] {
                    send(
                        adj,
                        *b,
                        reduce_to(&zip_broadcast(&g, va, |x, y| x * y), vb.shape()),
                    );
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (&vals[a.0], &vals[b.0]);
                if self.needs_grad[a.0] {
                    send(
                        adj,
                        *a,
                        reduce_to(&zip_broadcast(&g, vb, |x, y| x / y), va.shape()),
                    );
                }
                if self.needs_grad[b.0] {
                    // d(a/b)/db = -y/b
                    let gy = zip_broadcast(&g, y, |x, q| x * q);
                    send(
                        adj,
                        *b,
                        reduce_to(&zip_broadcast(&gy, vb, |x, d| -x / d), vb.shape()),
                    );
                }
            }
            Op::Neg(a) => send(adj, *a, g.map(|v| -v)),
            Op::Scale(a, c) => send(adj, *a, g.map(|v| v * c)),
            Op::AddScalar(a, _) => send(adj, *a, g),
            Op::MatMul(a, b) => {
                let (va, vb) = (&vals[a.0], &vals[b.0]);
                if self.needs_grad[a.0] {
                    send(adj, *a, matmul_raw(&g, &transpose_raw(vb)));
                }
                if self.needs_grad[b.0] {
                    send(adj, *b, matmul_raw(&transpose_raw(va), &g));
                }
            }
            Op::Transpose(a) => send(adj, *a, transpose_raw(&g)),
            Op::Exp(a) => send(adj, *a, zip_same(&g, y, |x, e| x * e)),
            Op::Log(a) => send(adj, *a, zip_same(&g, &vals[a.0], |x, v| x / v)),
            Op::Relu(a) => send(
                adj,
                *a,
                zip_same(&g, &vals[a.0], |x, v| if v > 0.0 { x } else { 0.0 }),
            ),
            Op::Square(a) => send(adj, *a, zip_same(&g, &vals[a.0], |x, v| 2.0 * x * v)),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut out = Tensor::zeros(y.shape());
                let (yd, gd, od) = (y.data(), g.data(), out.data_mut());
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let dot: f64 = (0..len)
                            .map(|j| gd[base + j * inner] * yd[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            od[p] = yd[p] * (gd[p] - dot);
                        }
                    }
                }
                send(adj, *a, out);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut out = Tensor::zeros(y.shape());
                let (yd, gd, od) = (y.data(), g.data(), out.data_mut());
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let total: f64 = (0..len).map(|j| gd[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            od[p] = gd[p] - yd[p].exp() * total;
                        }
                    }
                }
                send(adj, *a, out);
            }
            Op::Sum(a) => send(adj, *a, Tensor::full(vals[a.0].shape(), g.data()[0])),
            Op::SumAxis { x, axis, .. } => {
                let xs = vals[x.0].shape();
                let (outer, len, inner) = axis_split(xs, *axis);
                let mut out = Tensor::zeros(xs);
                let (gd, od) = (g.data(), out.data_mut());
                for o in 0..outer {
                    for j in 0..len {
                        for k in 0..inner {
                            od[(o * len + j) * inner + k] = gd[o * inner + k];
                        }
                    }
                }
                send(adj, *x, out);
            }
            Op::LogSumExp { x, axis, .. } => {
                let xv = &vals[x.0];
                let (outer, len, inner) = axis_split(xv.shape(), *axis);
                let mut out = Tensor::zeros(xv.shape());
                let (xd, yd, gd, od) = (xv.data(), y.data(), g.data(), out.data_mut());
                for o in 0..outer {
                    for k in 0..inner {
                        let r = o * inner + k;
                        for j in 0..len {
                            let p = (o * len + j) * inner + k;
                            od[p] = gd[r] * (xd[p] - yd[r]).exp();
                        }
                    }
                }
                send(adj, *x, out);
            }
            Op::SliceRows { x, start, end } => {
                let xv = &vals[x.0];
                let c = xv.cols();
                let mut out = Tensor::zeros(xv.shape());
                out.data_mut()[start * c..end * c].copy_from_slice(g.data());
                send(adj, *x, out);
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for p in xs {
                    let n = vals[p.0].numel();
                    let part = Tensor::new(
                        vals[p.0].shape().to_vec(),
                        g.data()[offset..offset + n].to_vec(),
                    )
                    .expect("slice sized from parent");
                    offset += n;
                    send(adj, *p, part);
                }
            }
            Op::Reshape(a, _) => {
                let shape = vals[a.0].shape().to_vec();
                send(
                    adj,
                    *a,
                    Tensor::new(shape, g.into_data()).expect("same numel"),
                );
            }
            Op::PairwiseSqDist(a, b) => {
                let (xa, xb) = (&vals[a.0], &vals[b.0]);
                let (n, m, d) = (xa.rows(), xb.rows(), xa.cols());
                let gd = g.data();
                if self.needs_grad[a.0] {
                    let mut out = Tensor::zeros(xa.shape());
                    let od = out.data_mut();
                    for i in 0..n {
                        for j in 0..m {
                            let w = 2.0 * gd[i * m + j];
                            for k in 0..d {
                                od[i * d + k] += w * (xa.data()[i * d + k] - xb.data()[j * d + k]);
                            }
                        }
                    }
                    send(adj, *a, out);
                }
                if self.needs_grad[b.0] {
                    let mut out = Tensor::zeros(xb.shape());
                    let od = out.data_mut();
                    for i in 0..n {
                        for j in 0..m {
                            let w = 2.0 * gd[i * m + j];
                            for k in 0..d {
                                od[j * d + k] += w * (xb.data()[j * d + k] - xa.data()[i * d + k]);
                            }
                        }
                    }
                    send(adj, *b, out);
                }
            }
        }
    }
}

fn shape_err(node: usize, msg: impl Into<String>) -> Error {
    Error::Shape {
        node,
        msg: msg.into(),
    }
}

fn eval_op(i: usize, op: &Op, v: &[Tensor], bindings: &Bindings) -> Result<Tensor> {
    let binary = |a: &NodeId, b: &NodeId, f: fn(f64, f64) -> f64| -> Result<Tensor> {
        let (ta, tb) = (&v[a.0], &v[b.0]);
        broadcast_shape(ta.shape(), tb.shape())
            .map(|_| zip_broadcast(ta, tb, f))
            .ok_or_else(|| {
                shape_err(
                    i,
                    format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
                )
            })
    };
    let check_axis = |t: &Tensor, axis: usize| -> Result<()> {
        if axis >= t.rank() {
            return Err(shape_err(
                i,
                format!("axis {axis} out of range for {:?}", t.shape()),
            ));
        }
        Ok(())
    };
    Ok(match op {
        Op::Input { id, .. } => bindings.get(id).cloned().ok_or(Error::Unbound(id.0))?,
        Op::Const(t) => t.clone(),
        Op::Add(a, b) => binary(a, b, |x, y| x + y)?,
        Op::Sub(a, b) => binary(a, b, |x, y| x - y)?,
        Op::Mul(a, b) => binary(a, b, |x, y| x * y)?,
        Op::Div(a, b) => binary(a, b, |x, y| x / y)?,
        Op::Neg(a) => v[a.0].map(|x| -x),
        Op::Scale(a, c) => v[a.0].map(|x| x * c),
        Op::AddScalar(a, c) => v[a.0].map(|x| x + c),
        Op::MatMul(a, b) => {
            let (ta, tb) = (&v[a.0], &v[b.0]);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(shape_err(
                    i,
                    format!("matmul {:?} x {:?}", ta.shape(), tb.shape()),
                ));
            }
            matmul_raw(ta, tb)
        }
        Op::Transpose(a) => {
            if v[a.0].rank() != 2 {
                return Err(shape_err(i, "transpose needs a matrix"));
            }
            transpose_raw(&v[a.0])
        }
        Op::Exp(a) => v[a.0].map(f64::exp),
        Op::Log(a) => v[a.0].map(f64::ln),
        Op::Relu(a) => v[a.0].map(|x| x.max(0.0)),
        Op::Square(a) => v[a.0].map(|x| x * x),
        Op::Softmax(a, axis) => {
            check_axis(&v[a.0], *axis)?;
            let lse = logsumexp_raw(&v[a.0], *axis, true);
            zip_broadcast(&v[a.0], &lse, |x, l| (x - l).exp())
        }
        Op::LogSoftmax(a, axis) => {
            check_axis(&v[a.0], *axis)?;
            let lse = logsumexp_raw(&v[a.0], *axis, true);
            zip_broadcast(&v[a.0], &lse, |x, l| x - l)
        }
        Op::Sum(a) => Tensor::scalar(v[a.0].data().iter().sum()),
        Op::SumAxis { x, axis, keepdim } => {
            check_axis(&v[x.0], *axis)?;
            sum_axis_raw(&v[x.0], *axis, *keepdim)
        }
        Op::LogSumExp { x, axis, keepdim } => {
            check_axis(&v[x.0], *axis)?;
            logsumexp_raw(&v[x.0], *axis, *keepdim)
        }
        Op::SliceRows { x, start, end } => {
            let t = &v[x.0];
            if t.rank() == 0 || start > end || *end > t.rows() {
                return Err(shape_err(
                    i,
                    format!("rows {start}..{end} of {:?}", t.shape()),
                ));
            }
            let c = t.cols();
            let mut shape = t.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(shape, t.data()[start * c..end * c].to_vec())?
        }
        Op::ConcatRows(xs) => {
            let first = xs.first().ok_or_else(|| shape_err(i, "empty concat"))?;
            let tail = v[first.0].shape().get(1..).unwrap_or(&[]).to_vec();
            let mut rows = 0;
            let mut data = vec![];
            for p in xs {
                let t = &v[p.0];
                if t.rank() == 0 || t.shape()[1..] != tail[..] {
                    return Err(shape_err(
                        i,
                        format!("concat of {:?} onto rows of {:?}", t.shape(), tail),
                    ));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            Tensor::new(shape, data)?
        }
        Op::Reshape(a, shape) => v[a.0]
            .reshape(shape.clone())
            .map_err(|_| shape_err(i, format!("reshape {:?} to {shape:?}", v[a.0].shape())))?,
        Op::PairwiseSqDist(a, b) => {
            let (ta, tb) = (&v[a.0], &v[b.0]);
            if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
                return Err(shape_err(
                    i,
                    format!("pairwise distance {:?} vs {:?}", ta.shape(), tb.shape()),
                ));
            }
            pairwise_sq_dist_raw(ta, tb)
        }
        Op::Detach(a) => v[a.0].clone(),
    })
}

pub(crate) fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Elementwise op with broadcasting; shapes must be broadcast-compatible.
pub(crate) fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return zip_same(a, b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape()).expect("compatible shapes");
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |k, ia, ib| data[k] = f(ad[ia], bd[ib]));
    Tensor::new(out, data).expect("broadcast shape")
}

/// Sums `g` (shaped as a broadcast result) back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape();
    let s = broadcast_strides(shape, out);
    let mut acc = Tensor::zeros(shape);
    let gd = g.data();
    let ad = acc.data_mut();
    for_each_broadcast(out, &s, &s, |k, i, _| ad[i] += gd[k]);
    acc
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, m, out).expect("matmul shape")
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (n, m) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data()[i * m + j];
        }
    }
    Tensor::matrix(m, n, out).expect("transpose shape")
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

fn sum_axis_raw(t: &Tensor, axis: usize, keepdim: bool) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for k in 0..inner {
                out[o * inner + k] += t.data()[(o * len + j) * inner + k];
            }
        }
    }
    Tensor::new(reduced_shape(t.shape(), axis, keepdim), out).expect("reduced shape")
}

pub(crate) fn logsumexp_raw(t: &Tensor, axis: usize, keepdim: bool) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let d = t.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..inner {
            let at = |j: usize| d[(o * len + j) * inner + k];
            let mx = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
            out[o * inner + k] = if mx == f64::NEG_INFINITY {
                mx
            } else {
                mx + (0..len).map(|j| (at(j) - mx).exp()).sum::<f64>().ln()
            };
        }
    }
    Tensor::new(reduced_shape(t.shape(), axis, keepdim), out).expect("reduced shape")
}

pub(crate) fn pairwise_sq_dist_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m, d) = (a.rows(), b.rows(), a.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xi = &a.data()[i * d..(i + 1) * d];
        for j in 0..m {
            let yj = &b.data()[j * d..(j + 1) * d];
            out[i * m + j] = xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum();
        }
    }
    Tensor::matrix(n, m, out).expect("pairwise shape")
}
