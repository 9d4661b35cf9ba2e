//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every evaluation. Each op computes its value
//! eagerly when it is added, so node ids are already in topological order and
//! [`Graph::backward`] simply walks them in reverse.
//!
//! Primitive set: add, sub, mul, matmul, tanh, relu, sum, mean, square,
//! concat (last axis), slice (last axis) and broadcast-add (row bias).

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_tn_raw, ParamVector, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
    BroadcastAdd(usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, or zeros if nothing flowed into it.
    pub fn get(&self, graph: &Graph, node: NodeId) -> Tensor {
        self.grads
            .get(node.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(graph.value(node).shape()))
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, inputs: &[usize]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(op, value, requires_grad))
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.v(a).zip_map(self.v(b), "add", |x, y| x + y)?;
        self.push("add", Op::Add(a.0, b.0), value, &[a.0, b.0])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.v(a).zip_map(self.v(b), "sub", |x, y| x - y)?;
        self.push("sub", Op::Sub(a.0, b.0), value, &[a.0, b.0])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.v(a).zip_map(self.v(b), "mul", |x, y| x * y)?;
        self.push("mul", Op::Mul(a.0, b.0), value, &[a.0, b.0])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = crate::tensor::matmul(self.v(a), self.v(b))?;
        self.push("matmul", Op::MatMul(a.0, b.0), value, &[a.0, b.0])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.v(a).map(f64::tanh);
        self.push("tanh", Op::Tanh(a.0), value, &[a.0])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.v(a).map(|x| x.max(0.0));
        self.push("relu", Op::Relu(a.0), value, &[a.0])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.v(a).map(|x| x * x);
        self.push("square", Op::Square(a.0), value, &[a.0])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.v(a).data().iter().sum());
        self.push("sum", Op::Sum(a.0), value, &[a.0])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.v(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push("mean", Op::Mean(a.0), value, &[a.0])
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let (rows, _) = self.v(*first).as_matrix("concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.v(*p).as_matrix("concat")?;
            if r != rows {
                return Err(Error::shape("concat", format!("row count {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.v(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", Op::Concat(ids.clone()), value, &ids)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.v(a).as_matrix("slice")?;
        if start >= end || end > cols {
            return Err(Error::shape("slice", format!("{start}..{end} of {cols} columns")));
        }
        let w = end - start;
        let src = self.v(a).data();
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + end]);
        }
        let value = Tensor::matrix(rows, w, data)?;
        self.push("slice", Op::Slice { src: a.0, start }, value, &[a.0])
    }

    /// `a [n,m] + bias [m]` broadcast over rows.
    pub fn broadcast_add(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.v(a).as_matrix("broadcast_add")?;
        let b = self.v(bias);
        if b.shape() != [cols] {
            return Err(Error::shape("broadcast_add", format!("bias {:?} for {cols} columns", b.shape())));
        }
        let mut data = self.v(a).data().to_vec();
        for i in 0..rows {
            for (x, &bv) in data[i * cols..(i + 1) * cols].iter_mut().zip(b.data()) {
                *x += bv;
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.push("broadcast_add", Op::BroadcastAdd(a.0, bias.0), value, &[a.0, bias.0])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::NotForwarded { node: output.0, len: self.nodes.len() });
        }
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::NonScalarOutput { shape: out.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut acc = |target: usize, delta: Tensor| -> Result<()> {
            if !self.nodes[target].requires_grad {
                return Ok(());
            }
            match &mut grads[target] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                acc(*a, g.zip_map(vb, "mul", |x, y| x * y)?)?;
                acc(*b, g.zip_map(va, "mul", |x, y| x * y)?)?;
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k) = va.as_matrix("matmul")?;
                let (_, m) = vb.as_matrix("matmul")?;
                if self.nodes[*a].requires_grad {
                    acc(*a, Tensor::matrix(n, k, matmul_nt_raw(g.data(), vb.data(), n, m, k))?)?;
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, Tensor::matrix(k, m, matmul_tn_raw(va.data(), g.data(), n, k, m))?)?;
                }
            }
            Op::Tanh(a) => {
                acc(*a, g.zip_map(&node.value, "tanh", |gy, y| gy * (1.0 - y * y))?)?;
            }
            Op::Relu(a) => {
                let va = &self.nodes[*a].value;
                acc(*a, g.zip_map(va, "relu", |gy, x| if x > 0.0 { gy } else { 0.0 })?)?;
            }
            Op::Square(a) => {
                let va = &self.nodes[*a].value;
                acc(*a, g.zip_map(va, "square", |gy, x| 2.0 * x * gy)?)?;
            }
            Op::Sum(a) => {
                acc(*a, Tensor::full(self.nodes[*a].value.shape(), g.data()[0]))?;
            }
            Op::Mean(a) => {
                let va = &self.nodes[*a].value;
                acc(*a, Tensor::full(va.shape(), g.data()[0] / va.len() as f64))?;
            }
            Op::Concat(parts) => {
                let (rows, total) = node.value.as_matrix("concat")?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.nodes[p].value.as_matrix("concat")?;
                    let mut data = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, Tensor::matrix(rows, w, data)?)?;
                    offset += w;
                }
            }
            Op::Slice { src, start } => {
                let (rows, cols) = self.nodes[*src].value.as_matrix("slice")?;
                let w = g.cols();
                let mut data = vec![0.0; rows * cols];
                for i in 0..rows {
                    data[i * cols + start..i * cols + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*src, Tensor::matrix(rows, cols, data)?)?;
            }
            Op::BroadcastAdd(a, bias) => {
                acc(*a, g.clone())?;
                let (rows, cols) = g.as_matrix("broadcast_add")?;
                let mut db = vec![0.0; cols];
                for i in 0..rows {
                    for (d, &x) in db.iter_mut().zip(&g.data()[i * cols..(i + 1) * cols]) {
                        *d += x;
                    }
                }
                acc(*bias, Tensor::vector(db)?)?;
            }
        }
        Ok(())
    }
}

/// Binds every segment of `params` as a gradient leaf, lets `build` construct a
/// scalar loss from them, and returns the loss with its gradient in the same
/// layout as `params`.
pub fn value_and_grad<F>(params: &ParamVector, build: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let leaves: Vec<NodeId> = params.segments().iter().map(|(_, t)| graph.param(t.clone())).collect();
    let loss = build(&mut graph, &leaves)?;
    let value = graph.value(loss).item()?;
    let grads = graph.backward(loss)?;
    let segments = params
        .segments()
        .iter()
        .zip(&leaves)
        .map(|((name, _), &id)| (name.clone(), grads.get(&graph, id)))
        .collect();
    Ok((value, ParamVector::new(segments)?))
}

/// Compares an analytic gradient against central differences, coordinate by
/// coordinate, and returns the largest `|analytic - numeric| / (|analytic| + 1e-12)`.
///
/// `loss_fn` returns the loss and its analytic gradient at the given point.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParamVector, h: f64) -> Result<f64>
where
    F: Fn(&ParamVector) -> Result<(f64, ParamVector)>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let (first, grad) = loss_fn(params)?;
    let (second, _) = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    if !grad.same_layout(params) {
        return Err(Error::LayoutMismatch("gradient layout differs from parameters".into()));
    }
    let analytic = grad.flatten();
    let mut flat = params.flatten();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + h;
        let plus = loss_fn(&params.unflatten(&flat)?)?.0;
        flat[i] = orig - h;
        let minus = loss_fn(&params.unflatten(&flat)?)?.0;
        flat[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
