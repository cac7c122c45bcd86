use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{
    check_temperature, gelu_grad_scalar, gelu_scalar, matmul_at_into, matmul_bt_into,
    matmul_into, softmax_rows, transpose_plain,
};
use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    Transpose(NodeId),
    Softmax {
        x: NodeId,
        temperature: f64,
    },
    LogSoftmax {
        x: NodeId,
        temperature: f64,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    Sum(NodeId),
    Select {
        x: NodeId,
        index: usize,
    },
    Cosine(NodeId, NodeId),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow(a, b) | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Gelu(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Select { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order. Single-writer; one backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of the loss with respect to every `requires_grad` leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&var.id)
    }

    /// Gradient of a leaf, or zeros of its shape when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), true, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), false, Op::Constant)
    }

    /// Records a shared constant without copying its data.
    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, false, Op::Constant)
    }

    fn push(&self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(op.inputs().iter().all(|&i| i < nodes.len()));
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Arc::new(value), requires_grad, op)
    }

    fn value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn check_owner(&self, var: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, var.tape) {
            Ok(())
        } else {
            Err(Error::Contract("variable belongs to a different tape".into()))
        }
    }

    /// Stacks the rows of `parts` in argument order.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.concat(parts, false)
    }

    /// Joins `parts` side by side along the trailing dimension.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.concat(parts, true)
    }

    fn concat<'t>(&'t self, parts: &[Var<'t>], by_cols: bool) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Input("concat of zero parts".into()));
        }
        for p in parts {
            self.check_owner(p)?;
        }
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let op_name = if by_cols { "concat_cols" } else { "concat_rows" };
        let base = &values[0];
        if base.rank() != 2 {
            return Err(Error::dim(op_name, base.shape(), &[]));
        }
        for v in &values[1..] {
            let ok = v.rank() == 2
                && if by_cols {
                    v.shape()[0] == base.shape()[0]
                } else {
                    v.shape()[1] == base.shape()[1]
                };
            if !ok {
                return Err(Error::dim(op_name, base.shape(), v.shape()));
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        let value = if by_cols {
            let rows = base.shape()[0];
            let cols: usize = values.iter().map(|v| v.shape()[1]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &values {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::new(vec![rows, cols], data)?
        } else {
            let rows: usize = values.iter().map(|v| v.shape()[0]).sum();
            let mut data = Vec::with_capacity(rows * base.shape()[1]);
            for v in &values {
                data.extend_from_slice(v.data());
            }
            Tensor::new(vec![rows, base.shape()[1]], data)?
        };
        Ok(self.record(
            value,
            if by_cols {
                Op::ConcatCols(ids)
            } else {
                Op::ConcatRows(ids)
            },
        ))
    }

    /// Stacks one-element values into a vector.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let mut data = Vec::with_capacity(parts.len());
        for p in parts {
            self.check_owner(p)?;
            data.push(p.value().item()?);
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.record(Tensor::vector(data), Op::ConcatRows(ids)))
    }

    /// Propagates from a scalar `loss` back to every `requires_grad` leaf.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_owner(&loss)?;
        if self.consumed.get() {
            return Err(Error::State("backward already called on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }

        let by_leaf = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| {
                let node = &nodes[id];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) => Some((
                        id,
                        Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"),
                    )),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { by_leaf })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            accumulate(grads, nodes, *a, |d| matmul_bt_into(g, bv.data(), d, m, n, k));
            accumulate(grads, nodes, *b, |d| matmul_at_into(av.data(), g, d, m, k, n));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| add_assign(d, g));
            accumulate(grads, nodes, *b, |d| add_assign(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| add_assign(d, g));
            accumulate(grads, nodes, *b, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d += g * y;
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(av.data()) {
                    *d += g * x;
                }
            });
        }
        Op::Scale(x, f) => {
            accumulate(grads, nodes, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += f * g)
            });
        }
        Op::AddRow(x, bias) => {
            accumulate(grads, nodes, *x, |d| add_assign(d, g));
            let n = nodes[*bias].value.len();
            accumulate(grads, nodes, *bias, |d| {
                for row in g.chunks(n) {
                    add_assign(d, row);
                }
            });
        }
        Op::Transpose(x) => {
            let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape");
            let back = transpose_plain(&gt);
            accumulate(grads, nodes, *x, |d| add_assign(d, back.data()));
        }
        Op::Softmax { x, temperature } => {
            let cols = out.cols();
            accumulate(grads, nodes, *x, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let inner: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - inner) / temperature;
                    }
                }
            });
        }
        Op::LogSoftmax { x, temperature } => {
            let cols = out.cols();
            accumulate(grads, nodes, *x, |d| {
                for ((drow, grow), lrow) in d
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let total: f64 = grow.iter().sum();
                    for ((d, g), l) in drow.iter_mut().zip(grow).zip(lrow) {
                        *d += (g - l.exp() * total) / temperature;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            rstd,
        } => {
            let n = out.cols();
            let gv = &nodes[*gain].value;
            accumulate(grads, nodes, *gain, |d| {
                for (grow, xrow) in g.chunks(n).zip(normalized.chunks(n)) {
                    for ((d, g), xh) in d.iter_mut().zip(grow).zip(xrow) {
                        *d += g * xh;
                    }
                }
            });
            accumulate(grads, nodes, *bias, |d| {
                for grow in g.chunks(n) {
                    add_assign(d, grow);
                }
            });
            accumulate(grads, nodes, *x, |d| {
                let nf = n as f64;
                for (((drow, grow), xrow), rs) in d
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(normalized.chunks(n))
                    .zip(rstd)
                {
                    let dxhat: Vec<f64> = grow.iter().zip(gv.data()).map(|(g, w)| g * w).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum();
                    for ((d, dh), xh) in drow.iter_mut().zip(&dxhat).zip(xrow) {
                        *d += rs / nf * (nf * dh - s1 - xh * s2);
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, |d| {
                for ((d, g), v) in d.iter_mut().zip(g).zip(xv.data()) {
                    *d += g * gelu_grad_scalar(*v);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[*p].value.len();
                accumulate(grads, nodes, *p, |d| add_assign(d, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::SliceRows { x, start } => {
            let cols = out.cols();
            accumulate(grads, nodes, *x, |d| {
                add_assign(&mut d[start * cols..start * cols + g.len()], g)
            });
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let w = nodes[*p].value.cols();
                accumulate(grads, nodes, *p, |d| {
                    for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                        add_assign(drow, &grow[offset..offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let w = out.cols();
            let total = nodes[*x].value.cols();
            accumulate(grads, nodes, *x, |d| {
                for (drow, grow) in d.chunks_mut(total).zip(g.chunks(w)) {
                    add_assign(&mut drow[*start..start + w], grow);
                }
            });
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, |d| add_assign(d, g)),
        Op::Sum(x) => accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Select { x, index } => accumulate(grads, nodes, *x, |d| d[*index] += g[0]),
        Op::Cosine(a, b) => {
            let (u, v) = (&nodes[*a].value, &nodes[*b].value);
            let (nu, nv) = (u.norm(), v.norm());
            let c = out.data()[0];
            accumulate(grads, nodes, *a, |d| {
                for ((d, ui), vi) in d.iter_mut().zip(u.data()).zip(v.data()) {
                    *d += g[0] * (vi / (nu * nv) - c * ui / (nu * nu));
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for ((d, ui), vi) in d.iter_mut().zip(u.data()).zip(v.data()) {
                    *d += g[0] * (ui / (nu * nv) - c * vi / (nv * nv));
                }
            });
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        self.tape.check_owner(other)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: fn(NodeId, NodeId) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(name, a.shape(), b.shape()));
        }
        Ok(self.tape.record(zip_map(&a, &b, f), op(self.id, other.id)))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut data, m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.tape.record(value, Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let value = self.value().scale(factor);
        self.tape.record(value, Op::Scale(self.id, factor))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Adds `bias` (length = trailing dim) to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let (x, b) = (self.value(), bias.value());
        if b.len() != x.cols() || b.rank() > 1 {
            return Err(Error::dim("add_row", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(b.len()) {
            add_assign(row, b.data());
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.record(value, Op::AddRow(self.id, bias.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim("transpose", x.shape(), &[]));
        }
        Ok(self.tape.record(transpose_plain(&x), Op::Transpose(self.id)))
    }

    /// Softmax of `x/τ` over the trailing dimension.
    pub fn softmax(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        let value = softmax_rows(&self.value(), temperature, false);
        Ok(self.tape.record(
            value,
            Op::Softmax {
                x: self.id,
                temperature,
            },
        ))
    }

    /// Row softmax where row `r` only sees columns `0..=r`.
    pub fn causal_softmax(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        let value = softmax_rows(&self.value(), temperature, true);
        Ok(self.tape.record(
            value,
            Op::Softmax {
                x: self.id,
                temperature,
            },
        ))
    }

    pub fn log_softmax(&self, temperature: f64) -> Result<Var<'t>> {
        check_temperature(temperature)?;
        let x = self.value();
        let cols = x.cols();
        let mut data = vec![0.0; x.len()];
        for (drow, xrow) in data.chunks_mut(cols).zip(x.data().chunks(cols)) {
            let max = xrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = xrow
                .iter()
                .map(|v| ((v - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            for (d, v) in drow.iter_mut().zip(xrow) {
                *d = (v - max) / temperature - lse;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.record(
            value,
            Op::LogSoftmax {
                x: self.id,
                temperature,
            },
        ))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let n = x.cols();
        if n == 0 || gv.len() != n || bv.len() != n {
            return Err(Error::dim("layer_norm", x.shape(), gv.shape()));
        }
        let mut normalized = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(x.rows());
        let mut data = vec![0.0; x.len()];
        for ((xrow, nrow), drow) in x
            .data()
            .chunks(n)
            .zip(normalized.chunks_mut(n))
            .zip(data.chunks_mut(n))
        {
            let mean = xrow.iter().sum::<f64>() / n as f64;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (((nv, dv), xv), (g, b)) in nrow
                .iter_mut()
                .zip(drow.iter_mut())
                .zip(xrow)
                .zip(gv.data().iter().zip(bv.data()))
            {
                *nv = (xv - mean) * rs;
                *dv = g * *nv + b;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.record(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                normalized,
                rstd,
            },
        ))
    }

    pub fn gelu(&self) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|v| gelu_scalar(*v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.tape.record(value, Op::Gelu(self.id))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || start + len > x.shape()[0] {
            return Err(Error::Index {
                index: start + len,
                bound: x.shape().first().copied().unwrap_or(0),
            });
        }
        let cols = x.shape()[1];
        let data = x.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        Ok(self.tape.record(value, Op::SliceRows { x: self.id, start }))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || start + len > x.shape()[1] {
            return Err(Error::Index {
                index: start + len,
                bound: x.shape().get(1).copied().unwrap_or(0),
            });
        }
        let rows = x.shape()[0];
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.tape.record(value, Op::SliceCols { x: self.id, start }))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.record(value, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.tape.record(Tensor::scalar(total), Op::Sum(self.id))
    }

    /// The element at flat `index`, as a scalar.
    pub fn select(&self, index: usize) -> Result<Var<'t>> {
        let x = self.value();
        let v = *x.data().get(index).ok_or(Error::Index {
            index,
            bound: x.len(),
        })?;
        Ok(self.tape.record(
            Tensor::scalar(v),
            Op::Select {
                x: self.id,
                index,
            },
        ))
    }

    /// Cosine similarity as a differentiable scalar.
    pub fn cosine_similarity(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (u, v) = (self.value(), other.value());
        if u.len() != v.len() {
            return Err(Error::dim("cosine_similarity", u.shape(), v.shape()));
        }
        let (nu, nv) = (u.norm(), v.norm());
        if nu == 0.0 || nv == 0.0 {
            return Err(Error::DegenerateInput(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let dot: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        Ok(self
            .tape
            .record(Tensor::scalar((dot / (nu * nv)).clamp(-1.0, 1.0)), Op::Cosine(self.id, other.id)))
    }
}
