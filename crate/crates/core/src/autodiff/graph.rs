use std::fmt;

use crate::scalar::Scalar;

use super::array::DenseArray;
use super::AutodiffError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable weight; gradients are reported.
    Parameter,
    /// Data that gradients are still reported for (used by gradient checks).
    Input,
    /// Data that never needs a gradient.
    Constant,
}

/// Primitive operation of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Leaf(LeafKind),
    Add,
    MatMul,
    /// Elementwise product.
    Mul,
    Sigmoid,
    Tanh,
    /// Softmax over every element of the operand.
    Softmax,
    /// Log-softmax over every element of the operand.
    LogSoftmax,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Sum,
    Mean,
    Abs,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add => "add",
            Op::MatMul => "matmul",
            Op::Mul => "mul",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Abs => "abs",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    needs_grad: bool,
}

/// Define-then-run computation graph.
///
/// Nodes are appended in topological order. [`Graph::forward`] evaluates every
/// node that has not been evaluated yet, so a graph can be extended and
/// re-forwarded incrementally (decoders use this to pick the next token).
pub struct Graph<S> {
    nodes: Vec<Node>,
    values: Vec<Option<DenseArray<S>>>,
    evaluated: usize,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar root with respect to every node upstream of it.
pub struct Gradients<S> {
    grads: Vec<Option<DenseArray<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, node: NodeId) -> Option<&DenseArray<S>> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, node: NodeId) -> Option<DenseArray<S>> {
        self.grads.get_mut(node.0).and_then(Option::take)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            evaluated: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, kind: LeafKind, value: Option<DenseArray<S>>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            inputs: Vec::new(),
            needs_grad: kind != LeafKind::Constant,
        });
        self.values.push(value);
        id
    }

    pub fn parameter(&mut self, value: DenseArray<S>) -> NodeId {
        self.leaf(LeafKind::Parameter, Some(value))
    }

    pub fn input(&mut self, value: DenseArray<S>) -> NodeId {
        self.leaf(LeafKind::Input, Some(value))
    }

    pub fn constant(&mut self, value: DenseArray<S>) -> NodeId {
        self.leaf(LeafKind::Constant, Some(value))
    }

    /// Input leaf whose value is supplied later through [`Graph::bind`].
    pub fn placeholder(&mut self) -> NodeId {
        self.leaf(LeafKind::Input, None)
    }

    pub fn leaf_kind(&self, node: NodeId) -> Option<LeafKind> {
        match self.nodes.get(node.0)?.op {
            Op::Leaf(kind) => Some(kind),
            _ => None,
        }
    }

    pub fn op(&self, node: NodeId) -> Op {
        self.nodes[node.0].op
    }

    /// Every leaf that participates in differentiation.
    pub fn differentiable_leaves(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .map(NodeId)
            .filter(|&id| {
                matches!(
                    self.leaf_kind(id),
                    Some(LeafKind::Parameter | LeafKind::Input)
                )
            })
            .collect()
    }

    /// Replaces the value of a leaf. Every node from that leaf onward is
    /// re-evaluated by the next [`Graph::forward`].
    pub fn bind(&mut self, leaf: NodeId, value: DenseArray<S>) -> Result<(), AutodiffError> {
        if self.leaf_kind(leaf).is_none() {
            return Err(AutodiffError::NotALeaf(leaf.0));
        }
        self.values[leaf.0] = Some(value);
        self.evaluated = self.evaluated.min(leaf.0);
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            needs_grad,
        });
        self.values.push(None);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh, vec![a])
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax, vec![a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax, vec![a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { axis, start, end }, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean, vec![a])
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs, vec![a])
    }

    /// `a - b`, composed as `a + b * (-1)`.
    pub fn sub(&mut self, a: NodeId, b: NodeId, shape: (usize, usize)) -> NodeId {
        let neg = self.constant(DenseArray::filled(shape.0, shape.1, -S::one()));
        let nb = self.mul(b, neg);
        self.add(a, nb)
    }

    /// `a * c` for a constant scalar `c`, composed with an elementwise product.
    pub fn scale(&mut self, a: NodeId, c: S, shape: (usize, usize)) -> NodeId {
        let k = self.constant(DenseArray::filled(shape.0, shape.1, c));
        self.mul(a, k)
    }

    /// `1 - a`, composed from add and mul.
    pub fn one_minus(&mut self, a: NodeId, shape: (usize, usize)) -> NodeId {
        let ones = self.constant(DenseArray::filled(shape.0, shape.1, S::one()));
        self.sub(ones, a, shape)
    }

    /// Sum of several nodes of equal shape.
    pub fn add_all(&mut self, parts: &[NodeId]) -> NodeId {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    pub fn value(&self, node: NodeId) -> Option<&DenseArray<S>> {
        if node.0 < self.evaluated || matches!(self.nodes[node.0].op, Op::Leaf(_)) {
            self.values[node.0].as_ref()
        } else {
            None
        }
    }

    /// Value of an already evaluated node. Panics if `forward` has not reached it.
    pub fn v(&self, node: NodeId) -> &DenseArray<S> {
        self.value(node)
            .unwrap_or_else(|| panic!("node {} has not been evaluated", node.0))
    }

    /// Evaluates all pending nodes and returns the value of the last node.
    pub fn forward(&mut self) -> Result<&DenseArray<S>, AutodiffError> {
        for idx in self.evaluated..self.nodes.len() {
            let value = self.eval_node(idx)?;
            if let Some(v) = value {
                if !v.is_finite() {
                    return Err(AutodiffError::NonFinite {
                        node: idx,
                        op: self.nodes[idx].op.name(),
                    });
                }
                self.values[idx] = Some(v);
            }
            self.evaluated = idx + 1;
        }
        self.values
            .last()
            .and_then(Option::as_ref)
            .ok_or(AutodiffError::EmptyGraph)
    }

    /// Binds leaf values and evaluates the graph.
    pub fn forward_with(
        &mut self,
        bindings: &[(NodeId, DenseArray<S>)],
    ) -> Result<&DenseArray<S>, AutodiffError> {
        for (leaf, value) in bindings {
            self.bind(*leaf, value.clone())?;
        }
        self.forward()
    }

    fn input_value(&self, id: NodeId) -> &DenseArray<S> {
        self.values[id.0]
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    fn eval_node(&self, idx: usize) -> Result<Option<DenseArray<S>>, AutodiffError> {
        let node = &self.nodes[idx];
        let op = node.op;
        let arg = |i: usize| self.input_value(node.inputs[i]);
        let mismatch = |a: &DenseArray<S>, b: &DenseArray<S>| AutodiffError::ShapeMismatch {
            op: op.name(),
            node: idx,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        };
        let out = match op {
            Op::Leaf(_) => {
                if self.values[idx].is_none() {
                    return Err(AutodiffError::UnboundLeaf(idx));
                }
                return Ok(None);
            }
            Op::Add | Op::Mul => {
                let (a, b) = (arg(0), arg(1));
                if a.shape() != b.shape() {
                    return Err(mismatch(a, b));
                }
                let values = a
                    .values()
                    .iter()
                    .zip(b.values())
                    .map(|(&x, &y)| if op == Op::Add { x + y } else { x * y })
                    .collect();
                DenseArray::new(a.shape().to_vec(), values)?
            }
            Op::MatMul => {
                let (a, b) = (arg(0), arg(1));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                    return Err(mismatch(a, b));
                }
                matmul(a, b)
            }
            Op::Sigmoid => arg(0).map(sigmoid),
            Op::Tanh => arg(0).map(|x| x.tanh()),
            Op::Softmax => softmax(arg(0)),
            Op::LogSoftmax => log_softmax(arg(0)),
            Op::Concat { axis } => concat(&node.inputs.iter().map(|&i| self.input_value(i)).collect::<Vec<_>>(), axis)
                .map_err(|(a, b)| AutodiffError::ShapeMismatch {
                    op: op.name(),
                    node: idx,
                    left: a,
                    right: b,
                })?,
            Op::Slice { axis, start, end } => {
                let a = arg(0);
                let extent = if axis == 0 { a.rows() } else { a.cols() };
                if a.shape().len() != 2 || axis > 1 || start >= end || end > extent {
                    return Err(AutodiffError::ShapeMismatch {
                        op: op.name(),
                        node: idx,
                        left: a.shape().to_vec(),
                        right: vec![start, end],
                    });
                }
                slice(a, axis, start, end)
            }
            Op::Sum => DenseArray::scalar(arg(0).values().iter().copied().sum()),
            Op::Mean => {
                let a = arg(0);
                let n = S::from_usize(a.len()).expect("length fits in scalar");
                DenseArray::scalar(a.values().iter().copied().sum::<S>() / n)
            }
            Op::Abs => arg(0).map(|x| x.abs()),
        };
        Ok(Some(out))
    }

    /// Reverse pass from a scalar root.
    ///
    /// Gradients of nodes feeding several consumers are accumulated over
    /// every path.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>, AutodiffError> {
        if root.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(root.0));
        }
        if root.0 >= self.evaluated {
            return Err(AutodiffError::ForwardNotRun);
        }
        let root_value = self.input_value(root);
        if root_value.len() != 1 {
            return Err(AutodiffError::RootNotScalar(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseArray<S>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(DenseArray::new(root_value.shape().to_vec(), vec![S::one()])?);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf(_)) || !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_backward(idx, &upstream);
            for (input, g) in node.inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, idx: usize, up: &DenseArray<S>) -> Vec<Option<DenseArray<S>>> {
        let node = &self.nodes[idx];
        let wants = |i: usize| self.nodes[node.inputs[i].0].needs_grad;
        let arg = |i: usize| self.input_value(node.inputs[i]);
        let out = self.input_value(NodeId(idx));
        let zip_map = |a: &DenseArray<S>, f: &dyn Fn(S, S) -> S| {
            DenseArray::new(
                a.shape().to_vec(),
                a.values().iter().zip(up.values()).map(|(&x, &g)| f(x, g)).collect(),
            )
            .expect("shape preserved")
        };
        match node.op {
            Op::Leaf(_) => Vec::new(),
            Op::Add => vec![
                wants(0).then(|| up.clone()),
                wants(1).then(|| up.clone()),
            ],
            Op::Mul => {
                let (a, b) = (arg(0), arg(1));
                vec![
                    wants(0).then(|| zip_map(b, &|y, g| y * g)),
                    wants(1).then(|| zip_map(a, &|x, g| x * g)),
                ]
            }
            Op::MatMul => {
                let (a, b) = (arg(0), arg(1));
                vec![
                    wants(0).then(|| matmul_transpose_b(up, b)),
                    wants(1).then(|| matmul_transpose_a(a, up)),
                ]
            }
            Op::Sigmoid => vec![Some(zip_map(out, &|y, g| g * y * (S::one() - y)))],
            Op::Tanh => vec![Some(zip_map(out, &|y, g| g * (S::one() - y * y)))],
            Op::Softmax => {
                let dot: S = out
                    .values()
                    .iter()
                    .zip(up.values())
                    .map(|(&y, &g)| y * g)
                    .sum();
                vec![Some(zip_map(out, &|y, g| y * (g - dot)))]
            }
            Op::LogSoftmax => {
                let total: S = up.values().iter().copied().sum();
                vec![Some(zip_map(out, &|y, g| g - y.exp() * total))]
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|&i| {
                        let part = self.input_value(i);
                        let extent = if axis == 0 { part.rows() } else { part.cols() };
                        let g = slice(up, axis, offset, offset + extent);
                        offset += extent;
                        self.nodes[i.0].needs_grad.then_some(g)
                    })
                    .collect()
            }
            Op::Slice { axis, start, end } => {
                let a = arg(0);
                let mut g = DenseArray::zeros_like(a);
                let cols = a.cols();
                for r in 0..up.rows() {
                    for c in 0..up.cols() {
                        let (tr, tc) = if axis == 0 { (r + start, c) } else { (r, c + start) };
                        debug_assert!(if axis == 0 { tr < end } else { tc < end });
                        g.values_mut()[tr * cols + tc] = up.get(r, c);
                    }
                }
                vec![Some(g)]
            }
            Op::Sum => {
                let g = up.values()[0];
                vec![Some(arg(0).map(|_| g))]
            }
            Op::Mean => {
                let a = arg(0);
                let g = up.values()[0] / S::from_usize(a.len()).expect("length fits");
                vec![Some(a.map(|_| g))]
            }
            Op::Abs => {
                // Subgradient 0 at the kink.
                vec![Some(zip_map(arg(0), &|x, g| {
                    if x > S::zero() {
                        g
                    } else if x < S::zero() {
                        -g
                    } else {
                        S::zero()
                    }
                }))]
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softmax<S: Scalar>(a: &DenseArray<S>) -> DenseArray<S> {
    let max = a.values().iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = a.values().iter().map(|&x| (x - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    DenseArray::new(a.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
        .expect("shape preserved")
}

pub(crate) fn log_softmax<S: Scalar>(a: &DenseArray<S>) -> DenseArray<S> {
    let max = a.values().iter().copied().fold(S::neg_infinity(), S::max);
    let lse = max + a.values().iter().map(|&x| (x - max).exp()).sum::<S>().ln();
    a.map(|x| x - lse)
}

fn matmul<S: Scalar>(a: &DenseArray<S>, b: &DenseArray<S>) -> DenseArray<S> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![S::zero(); m * n];
    let (av, bv) = (a.values(), b.values());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = av[i * k + p];
            if x == S::zero() {
                continue;
            }
            let brow = &bv[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
    DenseArray::matrix(m, n, out)
}

/// `g · bᵀ`
fn matmul_transpose_b<S: Scalar>(g: &DenseArray<S>, b: &DenseArray<S>) -> DenseArray<S> {
    let (m, n, k) = (g.rows(), g.cols(), b.rows());
    let mut out = vec![S::zero(); m * k];
    let (gv, bv) = (g.values(), b.values());
    for i in 0..m {
        let grow = &gv[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bv[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    DenseArray::matrix(m, k, out)
}

/// `aᵀ · g`
fn matmul_transpose_a<S: Scalar>(a: &DenseArray<S>, g: &DenseArray<S>) -> DenseArray<S> {
    let (m, k, n) = (a.rows(), a.cols(), g.cols());
    let mut out = vec![S::zero(); k * n];
    let (av, gv) = (a.values(), g.values());
    for i in 0..m {
        let grow = &gv[i * n..(i + 1) * n];
        for p in 0..k {
            let x = av[i * k + p];
            if x == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(grow) {
                *o = *o + x * y;
            }
        }
    }
    DenseArray::matrix(k, n, out)
}

type ShapePair = (Vec<usize>, Vec<usize>);

fn concat<S: Scalar>(parts: &[&DenseArray<S>], axis: usize) -> Result<DenseArray<S>, ShapePair> {
    let first = parts[0];
    for p in &parts[1..] {
        let ok = p.shape().len() == 2
            && match axis {
                0 => p.cols() == first.cols(),
                1 => p.rows() == first.rows(),
                _ => false,
            };
        if !ok {
            return Err((first.shape().to_vec(), p.shape().to_vec()));
        }
    }
    if axis > 1 {
        return Err((first.shape().to_vec(), vec![axis]));
    }
    if axis == 0 {
        let rows = parts.iter().map(|p| p.rows()).sum();
        let values = parts.iter().flat_map(|p| p.values().iter().copied()).collect();
        Ok(DenseArray::matrix(rows, first.cols(), values))
    } else {
        let rows = first.rows();
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                values.extend_from_slice(p.row(r));
            }
        }
        Ok(DenseArray::matrix(rows, cols, values))
    }
}

fn slice<S: Scalar>(a: &DenseArray<S>, axis: usize, start: usize, end: usize) -> DenseArray<S> {
    if axis == 0 {
        let c = a.cols();
        DenseArray::matrix(end - start, c, a.values()[start * c..end * c].to_vec())
    } else {
        let mut values = Vec::with_capacity(a.rows() * (end - start));
        for r in 0..a.rows() {
            values.extend_from_slice(&a.row(r)[start..end]);
        }
        DenseArray::matrix(a.rows(), end - start, values)
    }
}
