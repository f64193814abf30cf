use std::cell::{Ref, RefCell};

use super::tensor::{kernels, Tensor};
use crate::error::{contract_err, shape_err, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// a · bᵀ
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    AddBias(usize, usize),
    MulConst(usize, Tensor),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Softplus(usize),
    Powf(usize, f64),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    Reshape(usize),
    Transpose(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Nodes are appended as they are computed, so every node's parents precede
/// it and the node list is already a topological order. A tape is meant for
/// a single forward/backward cycle; build a fresh one per step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: &Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(contract_err(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let out = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

fn accumulate<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if let Some(da) = accumulate(grads, nodes, *a) {
                kernels::matmul_bt(g, vb.data(), da, m, n, k);
            }
            if let Some(db) = accumulate(grads, nodes, *b) {
                kernels::matmul_at(va.data(), g, db, m, k, n);
            }
        }
        Op::MatMulBt(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (va.rows(), va.cols(), vb.rows());
            if let Some(da) = accumulate(grads, nodes, *a) {
                kernels::matmul(g, vb.data(), da, m, n, k);
            }
            if let Some(db) = accumulate(grads, nodes, *b) {
                kernels::matmul_at(g, va.data(), db, m, n, k);
            }
        }
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if let Some(d) = accumulate(grads, nodes, p) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = accumulate(grads, nodes, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(d) = accumulate(grads, nodes, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * vb[i];
                }
            }
            if let Some(d) = accumulate(grads, nodes, *b) {
                for i in 0..d.len() {
                    d[i] += g[i] * va[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(d) = accumulate(grads, nodes, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] / vb[i];
                }
            }
            if let Some(d) = accumulate(grads, nodes, *b) {
                for i in 0..d.len() {
                    d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                }
            }
        }
        Op::Min(a, b) | Op::Max(a, b) => {
            let is_min = matches!(node.op, Op::Min(..));
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let pick_a: Vec<bool> = va
                .iter()
                .zip(vb)
                .map(|(x, y)| if is_min { x <= y } else { x >= y })
                .collect();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for i in 0..d.len() {
                    if pick_a[i] {
                        d[i] += g[i];
                    }
                }
            }
            if let Some(d) = accumulate(grads, nodes, *b) {
                for i in 0..d.len() {
                    if !pick_a[i] {
                        d[i] += g[i];
                    }
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(d) = accumulate(grads, nodes, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = accumulate(grads, nodes, *b) {
                let n = d.len();
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::MulConst(a, c) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * c.data()[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        Op::Tanh(a) => unary(grads, nodes, *a, |i, _| g[i] * (1.0 - y[i] * y[i])),
        Op::Relu(a) => unary(grads, nodes, *a, |i, x| if x > 0.0 { g[i] } else { 0.0 }),
        Op::Sigmoid(a) => unary(grads, nodes, *a, |i, _| g[i] * y[i] * (1.0 - y[i])),
        Op::Exp(a) => unary(grads, nodes, *a, |i, _| g[i] * y[i]),
        Op::Log(a) => unary(grads, nodes, *a, |i, x| g[i] / x),
        Op::Abs(a) => unary(grads, nodes, *a, |i, x| {
            if x > 0.0 {
                g[i]
            } else if x < 0.0 {
                -g[i]
            } else {
                0.0
            }
        }),
        Op::Softplus(a) => unary(grads, nodes, *a, |i, x| g[i] * sigmoid(x)),
        Op::Powf(a, p) => unary(grads, nodes, *a, |i, x| {
            if *p == 0.0 {
                0.0
            } else if x == 0.0 && *p >= 1.0 {
                if *p == 1.0 {
                    g[i]
                } else {
                    0.0
                }
            } else {
                g[i] * p * x.powf(p - 1.0)
            }
        }),
        Op::SoftmaxRows(a) => {
            let cols = node.value.cols();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            let cols = node.value.cols();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cols {
                        dr[j] += gr[j] - yr[j].exp() * gsum;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SliceCols(a, start) => {
            let src_cols = nodes[*a].value.cols();
            let out_cols = node.value.cols();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for (r, gr) in g.chunks(out_cols).enumerate() {
                    let base = r * src_cols + start;
                    d[base..base + out_cols]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if let Some(d) = accumulate(grads, nodes, p) {
                    for (r, dr) in d.chunks_mut(pc).enumerate() {
                        let src = &g[r * total + offset..r * total + offset + pc];
                        dr.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
                offset += pc;
            }
        }
        Op::SelectRows(a, rows) => {
            let cols = node.value.cols();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for (r, &src) in rows.iter().enumerate() {
                    let dr = &mut d[src * cols..(src + 1) * cols];
                    dr.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Gather(a, idx) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                for (i, &src) in idx.iter().enumerate() {
                    d[src] += g[i];
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (node.value.rows(), node.value.cols());
            if let Some(d) = accumulate(grads, nodes, *a) {
                // node is r×c, parent c×r
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
    }
}

fn unary(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: usize,
    local: impl Fn(usize, f64) -> f64,
) {
    let x = nodes[a].value.data();
    if let Some(d) = accumulate(grads, nodes, a) {
        for i in 0..d.len() {
            d[i] += local(i, x[i]);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Gradients of one backward sweep, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves the root does not depend on get zeros.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }

    /// Number of leaves that received a gradient buffer.
    pub fn leaf_count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary_op(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = {
            let v = self.value();
            let data = v.data().iter().map(|&x| f(x)).collect();
            Tensor::from_parts(v.shape().to_vec(), data)
        };
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary_op(
        &self,
        other: &Var<'t>,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(shape_err(format!(
                    "{name}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(shape_err(format!(
                    "matmul {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = vec![0.0; m * n];
            kernels::matmul(a.data(), b.data(), &mut out, m, k, n);
            Tensor::from_parts(vec![m, n], out)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// self · otherᵀ without materializing the transpose.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
                return Err(shape_err(format!(
                    "matmul_t {:?} x {:?}ᵀ",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let mut out = vec![0.0; m * n];
            kernels::matmul_bt(a.data(), b.data(), &mut out, m, k, n);
            Tensor::from_parts(vec![m, n], out)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMulBt(self.id, other.id), rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn minimum(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "minimum", Op::Min(self.id, other.id), |a, b| {
            if a <= b {
                a
            } else {
                b
            }
        })
    }

    pub fn maximum(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, "maximum", Op::Max(self.id, other.id), |a, b| {
            if a >= b {
                a
            } else {
                b
            }
        })
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let value = {
            let (x, b) = (self.value(), bias.value());
            if x.shape().len() != 2 || b.numel() != x.cols() {
                return Err(shape_err(format!(
                    "bias {:?} for input {:?}",
                    b.shape(),
                    x.shape()
                )));
            }
            let cols = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols) {
                row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(value, Op::AddBias(self.id, bias.id), rg))
    }

    /// Elementwise product with a fixed tensor that receives no gradient.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if a.shape() != c.shape() {
                return Err(shape_err(format!(
                    "mul_const: {:?} vs {:?}",
                    a.shape(),
                    c.shape()
                )));
            }
            let data = a.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self
            .tape
            .push(value, Op::MulConst(self.id, c.clone()), self.requires_grad()))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary_op(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary_op(Op::AddScalar(self.id), |x| x + c)
    }

    /// 1 − x
    pub fn one_minus(&self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary_op(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary_op(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary_op(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary_op(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary_op(Op::Log(self.id), f64::ln)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary_op(Op::Abs(self.id), f64::abs)
    }

    /// ln(1 + eˣ), computed stably.
    pub fn softplus(&self) -> Var<'t> {
        self.unary_op(Op::Softplus(self.id), softplus)
    }

    /// xᵖ for nonnegative inputs.
    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary_op(Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let value = {
            let v = self.value();
            let mut data = v.data().to_vec();
            softmax_rows_in_place(&mut data, v.cols());
            Tensor::from_parts(v.shape().to_vec(), data)
        };
        self.tape
            .push(value, Op::SoftmaxRows(self.id), self.requires_grad())
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let value = {
            let v = self.value();
            let cols = v.cols();
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            Tensor::from_parts(v.shape().to_vec(), data)
        };
        self.tape
            .push(value, Op::LogSoftmaxRows(self.id), self.requires_grad())
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let cols = v.cols();
            if v.shape().len() != 2 || start + len > cols {
                return Err(shape_err(format!(
                    "slice_cols {start}..{} of {:?}",
                    start + len,
                    v.shape()
                )));
            }
            let data = v
                .data()
                .chunks(cols)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            Tensor::from_parts(vec![v.rows(), len], data)
        };
        Ok(self
            .tape
            .push(value, Op::SliceCols(self.id, start), self.requires_grad()))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols of nothing"))?;
        let tape = first.tape;
        let rows = first.rows();
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            if vals.iter().any(|v| v.shape().len() != 2 || v.rows() != rows) {
                return Err(shape_err("concat_cols row mismatch"));
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::from_parts(vec![rows, total], data)
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(value, Op::ConcatCols(ids), rg))
    }

    /// Picks rows by index (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
                return Err(shape_err(format!("row {bad} out of {:?}", v.shape())));
            }
            let data = rows.iter().flat_map(|&r| v.row(r).iter().copied()).collect();
            Tensor::from_parts(vec![rows.len(), v.cols()], data)
        };
        Ok(self.tape.push(
            value,
            Op::SelectRows(self.id, rows.to_vec()),
            self.requires_grad(),
        ))
    }

    /// Picks individual elements by flat index into a vector.
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if let Some(&bad) = idx.iter().find(|&&i| i >= v.numel()) {
                return Err(shape_err(format!("index {bad} out of {:?}", v.shape())));
            }
            Tensor::vector(idx.iter().map(|&i| v.data()[i]).collect())
        };
        Ok(self
            .tape
            .push(value, Op::Gather(self.id, idx.to_vec()), self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().reshape(shape.to_vec())?;
        Ok(self
            .tape
            .push(value, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn transpose(&self) -> Var<'t> {
        let value = self.value().transpose();
        self.tape
            .push(value, Op::Transpose(self.id), self.requires_grad())
    }

    /// x · W + b
    pub fn linear(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_bias(bias)
    }
}
