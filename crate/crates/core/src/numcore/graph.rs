//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in creation order, which is also a topological order.
//! Values are computed eagerly whenever every input already has a value;
//! graphs built on top of [`Graph::placeholder`] stay unevaluated until
//! [`Graph::forward`] binds the placeholders.

use std::fmt;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

/// Names of the built-in non-leaf ops.
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "transpose",
    "add",
    "mul",
    "scale",
    "add_scalar",
    "silu",
    "silu_prime",
    "sum",
    "mean",
    "sum_rows",
    "squared_norm",
    "concat",
    "slice_cols",
    "stop_gradient",
];

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// User-defined operation with a hand-written gradient rule.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn output_shape(&self, inputs: &[(usize, usize)]) -> std::result::Result<(usize, usize), String>;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// Vector-Jacobian product for every input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Placeholder,
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Silu(NodeId),
    SiluPrime(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    SquaredNorm(NodeId),
    Concat(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    StopGradient(NodeId),
    Custom(Vec<NodeId>, Arc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Placeholder => "placeholder",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Silu(_) => "silu",
            Op::SiluPrime(_) => "silu_prime",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::SquaredNorm(_) => "squared_norm",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::StopGradient(_) => "stop_gradient",
            Op::Custom(_, op) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Placeholder | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Silu(a)
            | Op::SiluPrime(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::SquaredNorm(a)
            | Op::SliceCols(a, ..)
            | Op::StopGradient(a) => vec![*a],
            Op::Custom(ins, _) => ins.clone(),
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Constant | Op::Placeholder | Op::Param)
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: (usize, usize),
    value: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient slots produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros of the given shape when nothing reached it.
    pub fn wrt(&self, id: NodeId, shape: (usize, usize)) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }

    /// Node indices in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_second(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    Some((broadcast_dim(a.0, b.0)?, broadcast_dim(a.1, b.1)?))
}

/// Elementwise binary op with row/column/scalar broadcasting.
fn broadcast_zip(a: &Tensor, b: &Tensor, out: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.0 * out.1);
    for i in 0..out.0 {
        let ai = if ar == 1 { 0 } else { i * ac };
        let bi = if br == 1 { 0 } else { i * bc };
        for j in 0..out.1 {
            let x = ad[ai + if ac == 1 { 0 } else { j }];
            let y = bd[bi + if bc == 1 { 0 } else { j }];
            data.push(f(x, y));
        }
    }
    Tensor::matrix(out.0, out.1, data)
}

/// Sum a gradient down to a (possibly broadcast) operand shape.
fn reduce_to(g: &Tensor, target: (usize, usize)) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    if (r, c) == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target.0, target.1);
    let od = out.data_mut();
    for i in 0..r {
        let oi = if target.0 == 1 { 0 } else { i };
        for (j, v) in g.row_slice(i).iter().enumerate() {
            let oj = if target.1 == 1 { 0 } else { j };
            od[oi * target.1 + oj] += v;
        }
    }
    out
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

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or(Error::NotEvaluated(id.0))
    }

    /// All differentiable leaves in creation order.
    pub fn params(&self) -> Vec<NodeId> {
        self.ids_where(|op| matches!(op, Op::Param))
    }

    pub fn placeholders(&self) -> Vec<NodeId> {
        self.ids_where(|op| matches!(op, Op::Placeholder))
    }

    fn ids_where(&self, pred: impl Fn(&Op) -> bool) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| pred(&n.op))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn leaf(&mut self, op: Op, t: Tensor) -> Result<NodeId> {
        let shape = t.dims2()?;
        if !t.is_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        let requires_grad = matches!(op, Op::Param);
        self.nodes.push(Node {
            op,
            shape,
            value: Some(t),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Fixed input with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(Op::Constant, t)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(Op::Param, t)
    }

    /// Declared input whose value is bound later by [`Graph::forward`].
    pub fn placeholder(&mut self, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node {
            op: Op::Placeholder,
            shape: (rows, cols),
            value: None,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn infer_shape(&self, op: &Op) -> std::result::Result<(usize, usize), String> {
        let s = |id: &NodeId| self.nodes[id.0].shape;
        match op {
            Op::Constant | Op::Placeholder | Op::Param => unreachable!("leaves carry their shape"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (s(a), s(b));
                if sa.1 != sb.0 {
                    return Err(format!("cannot multiply {sa:?} by {sb:?}"));
                }
                Ok((sa.0, sb.1))
            }
            Op::Transpose(a) => Ok((s(a).1, s(a).0)),
            Op::Add(a, b) | Op::Mul(a, b) => broadcast_shape(s(a), s(b))
                .ok_or_else(|| format!("cannot broadcast {:?} with {:?}", s(a), s(b))),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Silu(a)
            | Op::SiluPrime(a)
            | Op::StopGradient(a) => Ok(s(a)),
            Op::Sum(_) | Op::Mean(_) | Op::SquaredNorm(_) => Ok((1, 1)),
            Op::SumRows(a) => Ok((s(a).0, 1)),
            Op::Concat(a, b) => {
                let (sa, sb) = (s(a), s(b));
                if sa.0 != sb.0 {
                    return Err(format!("concat row mismatch {sa:?} vs {sb:?}"));
                }
                Ok((sa.0, sa.1 + sb.1))
            }
            Op::SliceCols(a, start, end) => {
                let sa = s(a);
                if start >= end || *end > sa.1 {
                    return Err(format!("column range {start}..{end} invalid for {sa:?}"));
                }
                Ok((sa.0, end - start))
            }
            Op::Custom(ins, op) => {
                let shapes: Vec<_> = ins.iter().map(s).collect();
                op.output_shape(&shapes)
            }
        }
    }

    fn evaluate(&self, op: &Op, shape: (usize, usize)) -> Option<Tensor> {
        let v = |id: &NodeId| self.nodes[id.0].value.as_ref();
        let t = match op {
            Op::Constant | Op::Placeholder | Op::Param => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a)?, v(b)?);
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                let mut out = Tensor::zeros(m, n);
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    (a.data(), k as isize, 1),
                    (b.data(), n as isize, 1),
                    0.0,
                    out.data_mut(),
                );
                out
            }
            Op::Transpose(a) => v(a)?.transpose(),
            Op::Add(a, b) => broadcast_zip(v(a)?, v(b)?, shape, |x, y| x + y),
            Op::Mul(a, b) => broadcast_zip(v(a)?, v(b)?, shape, |x, y| x * y),
            Op::Scale(a, c) => v(a)?.scale(*c),
            Op::AddScalar(a, c) => v(a)?.map(|x| x + c),
            Op::Silu(a) => v(a)?.map(silu),
            Op::SiluPrime(a) => v(a)?.map(silu_prime),
            Op::Sum(a) => Tensor::scalar(v(a)?.sum()),
            Op::Mean(a) => Tensor::scalar(v(a)?.mean()),
            Op::SumRows(a) => {
                let a = v(a)?;
                let sums: Vec<f64> = (0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect();
                Tensor::column(&sums)
            }
            Op::SquaredNorm(a) => Tensor::scalar(v(a)?.squared_norm()),
            Op::Concat(a, b) => v(a)?.concat_cols(v(b)?),
            Op::SliceCols(a, start, end) => {
                let a = v(a)?;
                let mut data = Vec::with_capacity(a.rows() * (end - start));
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.row_slice(r)[*start..*end]);
                }
                Tensor::matrix(a.rows(), end - start, data)
            }
            Op::StopGradient(a) => v(a)?.clone(),
            Op::Custom(ins, op) => {
                let vals: Option<Vec<&Tensor>> = ins.iter().map(v).collect();
                op.forward(&vals?)
            }
        };
        Some(t)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let index = self.nodes.len();
        let shape = self.infer_shape(&op).map_err(|detail| Error::Shape {
            node: index,
            op: op.name(),
            detail,
        })?;
        let requires_grad = !matches!(op, Op::StopGradient(_))
            && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let value = self.evaluate(&op, shape);
        if let Some(v) = &value {
            if v.dims2().ok() != Some(shape) {
                return Err(Error::Shape {
                    node: index,
                    op: op.name(),
                    detail: format!("produced {:?}, declared {:?}", v.shape(), shape),
                });
            }
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    node: index,
                    op: op.name(),
                });
            }
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Ok(NodeId(index))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    /// Elementwise sum; either side may be a `[1, n]`, `[m, 1]` or `[1, 1]` broadcast.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Silu(a))
    }

    /// Derivative of [`Graph::silu`]; needed when gradients are themselves graph nodes.
    pub fn silu_prime(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SiluPrime(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    /// Per-row sum, `[m, n] -> [m, 1]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(a))
    }

    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SquaredNorm(a))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Concat(a, b))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceCols(a, start, end))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::StopGradient(a))
    }

    pub fn custom(&mut self, inputs: &[NodeId], op: Arc<dyn CustomOp>) -> Result<NodeId> {
        self.push(Op::Custom(inputs.to_vec(), op))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Replace the value of a leaf. Downstream values are stale until [`Graph::recompute`].
    pub fn set_value(&mut self, id: NodeId, t: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !node.op.is_leaf() {
            return Err(Error::Input(format!("node {id} is not a leaf")));
        }
        if t.dims2()? != node.shape {
            return Err(Error::Shape {
                node: id.0,
                op: node.op.name(),
                detail: format!("expected {:?}, got {:?}", node.shape, t.shape()),
            });
        }
        node.value = Some(t);
        Ok(())
    }

    /// Re-evaluate every non-leaf node from the current leaf values.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                if self.nodes[i].value.is_none() {
                    return Err(Error::NotEvaluated(i));
                }
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self
                .evaluate(&op, self.nodes[i].shape)
                .ok_or(Error::NotEvaluated(i))?;
            if !value.is_finite() {
                return Err(Error::NonFinite { node: i, op: op.name() });
            }
            self.nodes[i].value = Some(value);
        }
        Ok(())
    }

    /// Bind `inputs` to the placeholders (creation order), evaluate, and
    /// return the value of the last node.
    pub fn forward(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        let slots = self.placeholders();
        if slots.len() != inputs.len() {
            return Err(Error::Input(format!(
                "graph declares {} inputs, got {}",
                slots.len(),
                inputs.len()
            )));
        }
        for (id, t) in slots.iter().zip(inputs) {
            self.set_value(*id, t.clone())?;
        }
        self.recompute()?;
        let last = self
            .nodes
            .last()
            .ok_or_else(|| Error::Input("empty graph".into()))?;
        last.value.clone().ok_or(Error::NotEvaluated(self.nodes.len() - 1))
    }

    pub fn backward(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        self.backward_multi(&[(output, seed)])
    }

    /// Reverse sweep from several outputs at once; seeds are summed.
    pub fn backward_multi(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        let mut slots: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (id, seed) in seeds {
            let node = &self.nodes[id.0];
            if node.value.is_none() {
                return Err(Error::NotEvaluated(id.0));
            }
            if seed.dims2()? != node.shape {
                return Err(Error::Shape {
                    node: id.0,
                    op: node.op.name(),
                    detail: format!(
                        "output gradient {:?} does not match output {:?}",
                        seed.shape(),
                        node.shape
                    ),
                });
            }
            match &mut slots[id.0] {
                Some(g) => g.axpy(1.0, seed),
                slot => *slot = Some(seed.clone()),
            }
            start = start.max(id.0 + 1);
        }
        let mut visited = Vec::new();
        for i in (0..start).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = slots.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            visited.push(i);
            for (input, contrib) in self.vjp(i, g)? {
                match &mut lower[input.0] {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { slots, visited })
    }

    /// Input gradients of node `i` given its output gradient `g`.
    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[i];
        let val = |id: &NodeId| self.value(*id);
        let wants = |id: &NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Constant | Op::Placeholder | Op::Param | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a)?, val(b)?);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if wants(a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        (g.data(), n as isize, 1),
                        (bv.data(), 1, n as isize),
                        0.0,
                        ga.data_mut(),
                    );
                    out.push((*a, ga));
                }
                if wants(b) {
                    let mut gb = Tensor::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        (av.data(), 1, k as isize),
                        (g.data(), n as isize, 1),
                        0.0,
                        gb.data_mut(),
                    );
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((*a, reduce_to(g, self.shape(*a))));
                }
                if wants(b) {
                    out.push((*b, reduce_to(g, self.shape(*b))));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a)?, val(b)?);
                if wants(a) {
                    let full = broadcast_zip(g, bv, node.shape, |x, y| x * y);
                    out.push((*a, reduce_to(&full, self.shape(*a))));
                }
                if wants(b) {
                    let full = broadcast_zip(g, av, node.shape, |x, y| x * y);
                    out.push((*b, reduce_to(&full, self.shape(*b))));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.scale(*c))),
            Op::AddScalar(a, _) => out.push((*a, g.clone())),
            Op::Silu(a) => out.push((*a, g.zip_map(val(a)?, |gv, x| gv * silu_prime(x)))),
            Op::SiluPrime(a) => out.push((*a, g.zip_map(val(a)?, |gv, x| gv * silu_second(x)))),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                out.push((*a, Tensor::full(r, c, g.item())));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                out.push((*a, Tensor::full(r, c, g.item() / (r * c) as f64)));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                out.push((*a, broadcast_zip(&Tensor::ones(r, c), g, (r, c), |x, y| x * y)));
            }
            Op::SquaredNorm(a) => {
                let s = 2.0 * g.item();
                out.push((*a, val(a)?.scale(s)));
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = g.row_slice(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                if wants(a) {
                    out.push((*a, Tensor::matrix(rows, ca, ga)));
                }
                if wants(b) {
                    out.push((*b, Tensor::matrix(rows, cb, gb)));
                }
            }
            Op::SliceCols(a, start, _) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                let w = g.cols();
                for row in 0..r {
                    ga.data_mut()[row * c + start..row * c + start + w]
                        .copy_from_slice(g.row_slice(row));
                }
                out.push((*a, ga));
            }
            Op::Custom(ins, op) => {
                let vals: Vec<&Tensor> = ins.iter().map(val).collect::<Result<_>>()?;
                let output = node.value.as_ref().ok_or(Error::NotEvaluated(i))?;
                let grads = op.backward(&vals, output, g);
                if grads.len() != ins.len() {
                    return Err(Error::Shape {
                        node: i,
                        op: op.name(),
                        detail: format!("backward returned {} gradients for {} inputs", grads.len(), ins.len()),
                    });
                }
                for (id, gi) in ins.iter().zip(grads) {
                    if wants(id) {
                        out.push((*id, gi));
                    }
                }
            }
        }
        for (id, t) in &out {
            if t.dims2().ok() != Some(self.shape(*id)) {
                return Err(Error::Shape {
                    node: i,
                    op: node.op.name(),
                    detail: format!("gradient for {id} has shape {:?}", t.shape()),
                });
            }
            if !t.is_finite() {
                return Err(Error::NonFiniteGradient(id.0));
            }
        }
        Ok(out)
    }

    /// Sum a graph-valued gradient down to `target`, using only recorded ops.
    fn reduce_node(&mut self, g: NodeId, target: (usize, usize)) -> Result<NodeId> {
        let (r, c) = self.shape(g);
        let mut cur = g;
        if target.0 == 1 && r > 1 {
            let ones = self.constant(Tensor::ones(1, r))?;
            cur = self.matmul(ones, cur)?;
        }
        if target.1 == 1 && c > 1 {
            let ones = self.constant(Tensor::ones(c, 1))?;
            cur = self.matmul(cur, ones)?;
        }
        Ok(cur)
    }

    fn broadcast_node(&mut self, g: NodeId, target: (usize, usize)) -> Result<NodeId> {
        let ones = self.constant(Tensor::ones(target.0, target.1))?;
        self.mul(ones, g)
    }

    /// Gradients of `sum(output)` with respect to `wrt`, recorded as new
    /// nodes so they can be differentiated again.
    ///
    /// Second-order terms are supported for every op except `silu_prime`
    /// and custom ops, whose own gradients are value-only.
    pub fn grad_graph(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let end = output.0 + 1;
        let mut adj: Vec<Option<NodeId>> = vec![None; end];
        let (r, c) = self.shape(output);
        adj[output.0] = Some(self.constant(Tensor::ones(r, c))?);
        for i in (0..end).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let shape = self.nodes[i].shape;
            let mut contribs: Vec<(NodeId, NodeId)> = Vec::new();
            match op {
                Op::Constant | Op::Placeholder | Op::Param | Op::StopGradient(_) => {}
                Op::MatMul(a, b) => {
                    if self.requires_grad(a) {
                        let bt = self.transpose(b)?;
                        contribs.push((a, self.matmul(g, bt)?));
                    }
                    if self.requires_grad(b) {
                        let at = self.transpose(a)?;
                        contribs.push((b, self.matmul(at, g)?));
                    }
                }
                Op::Transpose(a) => contribs.push((a, self.transpose(g)?)),
                Op::Add(a, b) => {
                    for x in [a, b] {
                        if self.requires_grad(x) {
                            let s = self.shape(x);
                            contribs.push((x, self.reduce_node(g, s)?));
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (x, other) in [(a, b), (b, a)] {
                        if self.requires_grad(x) {
                            let full = self.mul(g, other)?;
                            let s = self.shape(x);
                            contribs.push((x, self.reduce_node(full, s)?));
                        }
                    }
                }
                Op::Scale(a, k) => contribs.push((a, self.scale(g, k)?)),
                Op::AddScalar(a, _) => contribs.push((a, g)),
                Op::Silu(a) => {
                    let d = self.silu_prime(a)?;
                    contribs.push((a, self.mul(g, d)?));
                }
                Op::Sum(a) => {
                    let s = self.shape(a);
                    contribs.push((a, self.broadcast_node(g, s)?));
                }
                Op::Mean(a) => {
                    let s = self.shape(a);
                    let full = self.broadcast_node(g, s)?;
                    contribs.push((a, self.scale(full, 1.0 / (s.0 * s.1) as f64)?));
                }
                Op::SumRows(a) => {
                    let s = self.shape(a);
                    contribs.push((a, self.broadcast_node(g, s)?));
                }
                Op::SquaredNorm(a) => {
                    let ag = self.mul(a, g)?;
                    contribs.push((a, self.scale(ag, 2.0)?));
                }
                Op::Concat(a, b) => {
                    let ca = self.shape(a).1;
                    if self.requires_grad(a) {
                        contribs.push((a, self.slice_cols(g, 0, ca)?));
                    }
                    if self.requires_grad(b) {
                        contribs.push((b, self.slice_cols(g, ca, shape.1)?));
                    }
                }
                Op::SliceCols(a, start, stop) => {
                    let (rows, cols) = self.shape(a);
                    let mut cur = g;
                    if start > 0 {
                        let z = self.constant(Tensor::zeros(rows, start))?;
                        cur = self.concat(z, cur)?;
                    }
                    if stop < cols {
                        let z = self.constant(Tensor::zeros(rows, cols - stop))?;
                        cur = self.concat(cur, z)?;
                    }
                    contribs.push((a, cur));
                }
                Op::SiluPrime(_) | Op::Custom(..) => {
                    return Err(Error::Unsupported(format!(
                        "graph-valued gradient through {} (node {i})",
                        op.name()
                    )));
                }
            }
            for (input, contrib) in contribs {
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(id) => Ok(id),
                None => {
                    let (r, c) = self.shape(*w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect()
    }
}
