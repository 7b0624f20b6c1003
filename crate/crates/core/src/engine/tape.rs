//! Recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so a node's parents always have
//! smaller ids and the graph is acyclic by construction. `backward` walks the
//! tape once in reverse.

use super::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{HexaError, Result};

/// Input floor applied by [`Primitive::Log`].
pub const LOG_FLOOR: f64 = 1e-12;
/// Offset inside [`Primitive::Sqrt`].
pub const SQRT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tags understood by [`Tape::apply`].
///
/// Binary elementwise primitives (`Add`, `Subtract`, `Hadamard`) accept a
/// right operand of the same shape, a single row (broadcast down the rows) or
/// a `1×1` scalar.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Subtract,
    Hadamard,
    ScalarMultiply(f64),
    ConcatColumns,
    Relu,
    Sigmoid,
    SoftmaxRows,
    /// `ln(max(x, LOG_FLOOR))`.
    Log,
    Square,
    /// `sqrt(max(x, 0) + SQRT_EPS)`.
    Sqrt,
    Sum,
    Mean,
    RowSelectByMask(Vec<bool>),
    Transpose,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Hadamard => "hadamard",
            Primitive::ScalarMultiply(_) => "scalar_multiply",
            Primitive::ConcatColumns => "concat_columns",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::RowSelectByMask(_) => "row_select_by_mask",
            Primitive::Transpose => "transpose",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Subtract
            | Primitive::Hadamard
            | Primitive::ConcatColumns => 2,
            _ => 1,
        }
    }
}

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    primitive: Option<Primitive>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one gradient per node, zero off the loss path.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.dims.get(id.0).copied().unwrap_or((1, 1));
                Tensor::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads.get_mut(id.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => {
                let (r, c) = self.dims.get(id.0).copied().unwrap_or((1, 1));
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, primitive: Option<Primitive>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: value.as_matrix_owned(),
            parents,
            primitive,
            requires_grad,
        });
        id
    }

    /// A leaf that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Vec::new(), None, false)
    }

    /// A differentiable leaf.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(value, Vec::new(), None, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    pub fn primitive(&self, id: NodeId) -> Option<&Primitive> {
        self.nodes[id.0].primitive.as_ref()
    }

    /// Evaluates `kind` on `inputs` and records the result.
    pub fn apply(&mut self, kind: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(HexaError::dim(
                kind.name(),
                format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(HexaError::contract(format!(
                    "{}: node {} is not on this tape",
                    kind.name(),
                    id.0
                )));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&kind, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(value, inputs.to_vec(), Some(kind), requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Hadamard, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Primitive::ScalarMultiply(factor), &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ConcatColumns, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SoftmaxRows, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Square, &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sqrt, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn select_rows(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        self.apply(Primitive::RowSelectByMask(mask), &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }

    /// `Σ terms[i].1 · terms[i].0`, skipping zero weights. Errors on an empty sum.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(node, w) in terms {
            if w == 0.0 {
                continue;
            }
            let term = if w == 1.0 { node } else { self.scale(node, w)? };
            acc = Some(match acc {
                None => term,
                Some(a) => self.add(a, term)?,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => Ok(self.constant(Tensor::scalar(0.0))),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(HexaError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let dims = self.nodes.iter().map(|n| n.value.dims()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, dims });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(kind) = node.primitive.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = backward(kind, &inputs, &node.value, &g, &needs);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match &mut grads[parent.0] {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(pg.data()) {
                            *e += v;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, dims })
    }
}

impl Tensor {
    fn as_matrix_owned(self) -> Tensor {
        if self.shape().len() == 2 {
            self
        } else {
            let (r, c) = self.dims();
            Tensor::from_matrix(r, c, self.into_data()).expect("same length")
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    if (ar, ac) == (br, bc) {
        Ok(Broadcast::Same)
    } else if br == 1 && bc == 1 {
        Ok(Broadcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Broadcast::Row)
    } else {
        Err(HexaError::dim(
            op,
            format!("cannot combine {:?} with {:?}", a.shape(), b.shape()),
        ))
    }
}

fn binary_elementwise(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let mode = broadcast_kind(op, a, b)?;
    let (r, c) = a.dims();
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match mode {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
        Broadcast::Row => ad
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % c]))
            .collect(),
    };
    Tensor::from_matrix(r, c, data)
}

/// Sums a gradient of `a`'s shape down to `b`'s broadcast shape.
fn reduce_to(g: Tensor, mode: Broadcast, cols: usize) -> Tensor {
    match mode {
        Broadcast::Same => g,
        Broadcast::Scalar => Tensor::scalar(g.data().iter().sum()),
        Broadcast::Row => {
            let mut acc = vec![0.0; cols];
            for (i, v) in g.data().iter().enumerate() {
                acc[i % cols] += v;
            }
            Tensor::row_vector(acc)
        }
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

fn forward(kind: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let name = kind.name();
    match kind {
        Primitive::MatMul => {
            let (m, k) = x[0].dims();
            let (k2, n) = x[1].dims();
            if k != k2 {
                return Err(HexaError::dim(
                    name,
                    format!("{:?} x {:?}", x[0].shape(), x[1].shape()),
                ));
            }
            let mut out = vec![0.0; m * n];
            matmul_into(x[0].data(), x[1].data(), m, k, n, &mut out);
            Tensor::from_matrix(m, n, out)
        }
        Primitive::Add => binary_elementwise(name, x[0], x[1], |a, b| a + b),
        Primitive::Subtract => binary_elementwise(name, x[0], x[1], |a, b| a - b),
        Primitive::Hadamard => binary_elementwise(name, x[0], x[1], |a, b| a * b),
        Primitive::ScalarMultiply(s) => Ok(x[0].map(|v| v * s)),
        Primitive::ConcatColumns => {
            let (ar, ac) = x[0].dims();
            let (br, bc) = x[1].dims();
            if ar != br {
                return Err(HexaError::dim(
                    name,
                    format!("row counts differ: {:?} vs {:?}", x[0].shape(), x[1].shape()),
                ));
            }
            let mut data = Vec::with_capacity(ar * (ac + bc));
            for r in 0..ar {
                data.extend_from_slice(x[0].row(r));
                data.extend_from_slice(x[1].row(r));
            }
            Tensor::from_matrix(ar, ac + bc, data)
        }
        Primitive::Relu => Ok(x[0].map(|v| v.max(0.0))),
        Primitive::Sigmoid => Ok(x[0].map(sigmoid)),
        Primitive::SoftmaxRows => {
            let (r, c) = x[0].dims();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = x[0].row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                data.extend(exps.iter().map(|e| e / total));
            }
            Tensor::from_matrix(r, c, data)
        }
        Primitive::Log => Ok(x[0].map(|v| v.max(LOG_FLOOR).ln())),
        Primitive::Square => Ok(x[0].map(|v| v * v)),
        Primitive::Sqrt => Ok(x[0].map(|v| (v.max(0.0) + SQRT_EPS).sqrt())),
        Primitive::Sum => Ok(Tensor::scalar(x[0].data().iter().sum())),
        Primitive::Mean => {
            if x[0].is_empty() {
                return Err(HexaError::dim(name, "mean of an empty tensor"));
            }
            Ok(Tensor::scalar(
                x[0].data().iter().sum::<f64>() / x[0].len() as f64,
            ))
        }
        Primitive::RowSelectByMask(mask) => {
            if mask.len() != x[0].rows() {
                return Err(HexaError::dim(
                    name,
                    format!("mask of length {} for {:?}", mask.len(), x[0].shape()),
                ));
            }
            let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            Ok(x[0].gather_rows(&idx))
        }
        Primitive::Transpose => Ok(x[0].transpose()),
    }
}

fn backward(kind: &Primitive, x: &[&Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match kind {
        Primitive::MatMul => {
            let (m, k) = x[0].dims();
            let n = x[1].cols();
            let ga = want(0).then(|| {
                let mut d = vec![0.0; m * k];
                matmul_nt_acc(g.data(), x[1].data(), m, k, n, &mut d);
                Tensor::from_matrix(m, k, d).expect("shape")
            });
            let gb = want(1).then(|| {
                let mut d = vec![0.0; k * n];
                matmul_tn_acc(x[0].data(), g.data(), m, k, n, &mut d);
                Tensor::from_matrix(k, n, d).expect("shape")
            });
            vec![ga, gb]
        }
        Primitive::Add | Primitive::Subtract => {
            let mode = broadcast_kind("add", x[0], x[1]).expect("checked in forward");
            let ga = want(0).then(|| g.clone());
            let gb = want(1).then(|| {
                let r = reduce_to(g.clone(), mode, x[1].cols());
                if matches!(kind, Primitive::Subtract) {
                    r.map(|v| -v)
                } else {
                    r
                }
            });
            vec![ga, gb]
        }
        Primitive::Hadamard => {
            let mode = broadcast_kind("hadamard", x[0], x[1]).expect("checked in forward");
            let ga = want(0).then(|| binary_elementwise("hadamard", g, x[1], |a, b| a * b).expect("shape"));
            let gb = want(1).then(|| {
                let prod = g.zip_map(x[0], |a, b| a * b).expect("shape");
                reduce_to(prod, mode, x[1].cols())
            });
            vec![ga, gb]
        }
        Primitive::ScalarMultiply(s) => vec![Some(g.map(|v| v * s))],
        Primitive::ConcatColumns => {
            let (r, ac) = x[0].dims();
            let bc = x[1].cols();
            let ga = want(0).then(|| {
                let mut d = Vec::with_capacity(r * ac);
                for i in 0..r {
                    d.extend_from_slice(&g.row(i)[..ac]);
                }
                Tensor::from_matrix(r, ac, d).expect("shape")
            });
            let gb = want(1).then(|| {
                let mut d = Vec::with_capacity(r * bc);
                for i in 0..r {
                    d.extend_from_slice(&g.row(i)[ac..]);
                }
                Tensor::from_matrix(r, bc, d).expect("shape")
            });
            vec![ga, gb]
        }
        Primitive::Relu => vec![Some(
            g.zip_map(x[0], |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                .expect("shape"),
        )],
        Primitive::Sigmoid => vec![Some(
            g.zip_map(out, |gv, s| gv * s * (1.0 - s)).expect("shape"),
        )],
        Primitive::SoftmaxRows => {
            let (r, c) = out.dims();
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                let s = out.row(i);
                let gr = g.row(i);
                let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                d.extend(s.iter().zip(gr).map(|(sv, gv)| sv * (gv - dot)));
            }
            vec![Some(Tensor::from_matrix(r, c, d).expect("shape"))]
        }
        Primitive::Log => vec![Some(
            g.zip_map(x[0], |gv, xv| if xv > LOG_FLOOR { gv / xv } else { 0.0 })
                .expect("shape"),
        )],
        Primitive::Square => vec![Some(g.zip_map(x[0], |gv, xv| 2.0 * gv * xv).expect("shape"))],
        Primitive::Sqrt => vec![Some(
            g.zip_map(x[0], |gv, xv| {
                if xv > 0.0 {
                    gv * 0.5 / (xv + SQRT_EPS).sqrt()
                } else {
                    0.0
                }
            })
            .expect("shape"),
        )],
        Primitive::Sum => {
            let gv = g.item();
            vec![Some(x[0].map(|_| gv))]
        }
        Primitive::Mean => {
            let gv = g.item() / x[0].len() as f64;
            vec![Some(x[0].map(|_| gv))]
        }
        Primitive::RowSelectByMask(mask) => {
            let (r, c) = x[0].dims();
            let mut d = vec![0.0; r * c];
            let mut k = 0;
            for (i, &keep) in mask.iter().enumerate() {
                if keep {
                    d[i * c..(i + 1) * c].copy_from_slice(g.row(k));
                    k += 1;
                }
            }
            vec![Some(Tensor::from_matrix(r, c, d).expect("shape"))]
        }
        Primitive::Transpose => vec![Some(g.transpose())],
    }
}
