use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{self, ConvGeom};
use super::{DiffError, Tensor};

/// Lower bound applied to `log` operands.
pub const LOG_EPS: f64 = 1e-7;
/// Lower bound applied to the magnitude of `div` denominators.
pub const DIV_EPS: f64 = 1e-12;

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient flowing into the output, and returns one optional gradient per
/// input (same length as that input).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Row-combination taps: output row `r` is `Σ weight · src[row]` over `taps[r]`.
pub type RowTaps = Vec<Vec<(usize, f64)>>;

enum Op {
    Leaf { requires_grad: bool },
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Sum(usize),
    Mean(usize),
    AddRowBias { a: usize, bias: usize, cols: usize },
    Conv2d { input: usize, weight: usize, bias: usize, geom: ConvGeom },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape(usize),
    ConcatCols { a: usize, b: usize, rows: usize, left: usize, right: usize },
    GatherRows { src: usize, cols: usize, taps: RowTaps },
    Custom { op: Box<dyn CustomOp>, inputs: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracks: bool,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// A recording of differentiable computations.
///
/// Nodes are appended in evaluation order, so node ids are already a
/// topological order and backward walks them in reverse.
#[derive(Default)]
pub struct Graph {
    tape: RefCell<Tape>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf { requires_grad }, requires_grad)
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let tape = self.tape.borrow();
        let node = &tape.nodes[var.id];
        tape.leaf_grads[var.id].as_ref().map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&self) {
        self.tape.borrow_mut().leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records the result of an externally computed operation.
    pub fn custom<'g>(&'g self, op: Box<dyn CustomOp>, inputs: &[Var<'g>], output: Tensor) -> Var<'g> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let tracks = self.any_tracks(&ids);
        self.push(output, Op::Custom { op, inputs: ids }, tracks)
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), DiffError> {
        let mut tape = self.tape.borrow_mut();
        let Tape { nodes, leaf_grads } = &mut *tape;
        if !nodes[loss.id].value.is_scalar() {
            return Err(DiffError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracks {
                continue;
            }
            propagate(nodes, id, g, &mut grads, leaf_grads);
        }
        Ok(())
    }

    fn push(&self, value: Tensor, op: Op, tracks: bool) -> Var<'_> {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node { value, op, tracks });
        tape.leaf_grads.push(None);
        Var { graph: self, id }
    }

    fn any_tracks(&self, ids: &[usize]) -> bool {
        let tape = self.tape.borrow();
        ids.iter().any(|&i| tape.nodes[i].tracks)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.tape.borrow(), |t| &t.nodes[id].value)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

/// Reduces a gradient to the operand's size when the operand was a broadcast scalar.
fn unbroadcast(g: Vec<f64>, operand_len: usize) -> Vec<f64> {
    if operand_len == g.len() {
        g
    } else {
        vec![g.iter().sum()]
    }
}

fn at(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

fn propagate(
    nodes: &[Node],
    id: usize,
    g: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
    leaf_grads: &mut [Option<Vec<f64>>],
) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let tracks = |i: usize| nodes[i].tracks;
    match &node.op {
        Op::Leaf { requires_grad } => {
            if *requires_grad {
                match &mut leaf_grads[id] {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Op::Unary(kind, a) => {
            let x = val(*a).data();
            let y = node.value.data();
            let ga: Vec<f64> = match kind {
                UnaryKind::Neg => g.iter().map(|v| -v).collect(),
                UnaryKind::Exp => g.iter().zip(y).map(|(gv, yv)| gv * yv).collect(),
                UnaryKind::Log => g.iter().zip(x).map(|(gv, xv)| if *xv >= LOG_EPS { gv / xv } else { 0.0 }).collect(),
                UnaryKind::Sigmoid => g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect(),
                UnaryKind::Relu => g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect(),
                UnaryKind::Square => g.iter().zip(x).map(|(gv, xv)| 2.0 * xv * gv).collect(),
            };
            accumulate(grads, *a, ga);
        }
        Op::Binary(kind, a, b) => {
            let (xa, xb) = (val(*a).data(), val(*b).data());
            let n = g.len();
            if tracks(*a) {
                let ga: Vec<f64> = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.clone(),
                    BinaryKind::Mul => (0..n).map(|i| g[i] * at(xb, i)).collect(),
                    BinaryKind::Div => (0..n).map(|i| g[i] / guard_den(at(xb, i))).collect(),
                };
                accumulate(grads, *a, unbroadcast(ga, xa.len()));
            }
            if tracks(*b) {
                let gb: Vec<f64> = match kind {
                    BinaryKind::Add => g.clone(),
                    BinaryKind::Sub => g.iter().map(|v| -v).collect(),
                    BinaryKind::Mul => (0..n).map(|i| g[i] * at(xa, i)).collect(),
                    BinaryKind::Div => (0..n)
                        .map(|i| {
                            let d = at(xb, i);
                            if d.abs() >= DIV_EPS {
                                -g[i] * at(xa, i) / (d * d)
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                };
                accumulate(grads, *b, unbroadcast(gb, xb.len()));
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            if tracks(*a) {
                let ga = kernels::matmul_bt(&g, val(*b).data(), *m, *n, *k);
                accumulate(grads, *a, ga);
            }
            if tracks(*b) {
                let gb = kernels::matmul_at(val(*a).data(), &g, *m, *k, *n);
                accumulate(grads, *b, gb);
            }
        }
        Op::Sum(a) => {
            let len = val(*a).len();
            accumulate(grads, *a, vec![g[0]; len]);
        }
        Op::Mean(a) => {
            let len = val(*a).len();
            accumulate(grads, *a, vec![g[0] / len as f64; len]);
        }
        Op::AddRowBias { a, bias, cols } => {
            if tracks(*bias) {
                let mut gb = vec![0.0; *cols];
                for row in g.chunks(*cols) {
                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                accumulate(grads, *bias, gb);
            }
            if tracks(*a) {
                accumulate(grads, *a, g);
            }
        }
        Op::Conv2d { input, weight, bias, geom } => {
            if tracks(*weight) || tracks(*bias) {
                let (gw, gb) = kernels::conv2d_grad_params(&g, val(*input).data(), *geom);
                if tracks(*weight) {
                    accumulate(grads, *weight, gw);
                }
                if tracks(*bias) {
                    accumulate(grads, *bias, gb);
                }
            }
            if tracks(*input) {
                let gi = kernels::conv2d_grad_input(&g, val(*weight).data(), *geom);
                accumulate(grads, *input, gi);
            }
        }
        Op::Transpose { a, rows, cols } => {
            // forward mapped [rows×cols] to [cols×rows]
            let mut ga = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    ga[r * cols + c] = g[c * rows + r];
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::Reshape(a) => accumulate(grads, *a, g),
        Op::ConcatCols { a, b, rows, left, right } => {
            let width = left + right;
            if tracks(*a) {
                let mut ga = Vec::with_capacity(rows * left);
                for r in 0..*rows {
                    ga.extend_from_slice(&g[r * width..r * width + left]);
                }
                accumulate(grads, *a, ga);
            }
            if tracks(*b) {
                let mut gb = Vec::with_capacity(rows * right);
                for r in 0..*rows {
                    gb.extend_from_slice(&g[r * width + left..(r + 1) * width]);
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::GatherRows { src, cols, taps } => {
            let mut gs = vec![0.0; val(*src).len()];
            for (r, row_taps) in taps.iter().enumerate() {
                let grow = &g[r * cols..(r + 1) * cols];
                for &(sr, w) in row_taps {
                    let dst = &mut gs[sr * cols..(sr + 1) * cols];
                    dst.iter_mut().zip(grow).for_each(|(d, gv)| *d += w * gv);
                }
            }
            accumulate(grads, *src, gs);
        }
        Op::Custom { op, inputs } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let out = op.backward(&ins, &node.value, &g);
            debug_assert_eq!(out.len(), inputs.len(), "{} returned wrong arity", op.name());
            for (&i, gi) in inputs.iter().zip(out) {
                if let Some(gi) = gi {
                    if tracks(i) {
                        accumulate(grads, i, gi);
                    }
                }
            }
        }
    }
}

fn guard_den(d: f64) -> f64 {
    if d.abs() >= DIV_EPS {
        d
    } else if d < 0.0 {
        -DIV_EPS
    } else {
        DIV_EPS
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.graph.value_ref(self.id).clone()
    }

    /// Borrow of the forward value; do not hold it across op calls.
    pub fn value_ref(&self) -> Ref<'g, Tensor> {
        self.graph.value_ref(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value_ref().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.value_ref().data()[0]
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn unary(self, kind: UnaryKind) -> Var<'g> {
        let out = {
            let x = self.value_ref();
            let data: Vec<f64> = match kind {
                UnaryKind::Neg => x.data().iter().map(|v| -v).collect(),
                UnaryKind::Exp => x.data().iter().map(|v| v.exp()).collect(),
                UnaryKind::Log => x.data().iter().map(|v| v.max(LOG_EPS).ln()).collect(),
                UnaryKind::Sigmoid => x.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
                UnaryKind::Relu => x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                UnaryKind::Square => x.data().iter().map(|v| v * v).collect(),
            };
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        let tracks = self.graph.any_tracks(&[self.id]);
        self.graph.push(out, Op::Unary(kind, self.id), tracks)
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural log with the operand clamped to at least [`LOG_EPS`].
    pub fn log(self) -> Var<'g> {
        self.unary(UnaryKind::Log)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(UnaryKind::Sigmoid)
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'g> {
        self.unary(UnaryKind::Relu)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(UnaryKind::Square)
    }

    pub fn apply_unary(self, kind: UnaryKind) -> Var<'g> {
        self.unary(kind)
    }

    /// Elementwise binary op. Shapes must match, or one side must hold a single value.
    pub fn binary(self, kind: BinaryKind, rhs: Var<'g>) -> Result<Var<'g>, DiffError> {
        let out = {
            let (a, b) = (self.value_ref(), rhs.value_ref());
            let shape = if a.shape() == b.shape() || b.is_scalar() {
                a.shape().to_vec()
            } else if a.is_scalar() {
                b.shape().to_vec()
            } else {
                return Err(DiffError::ShapeMismatch {
                    op: binary_name(kind),
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            };
            let n = a.len().max(b.len());
            let (xa, xb) = (a.data(), b.data());
            let data: Vec<f64> = match kind {
                BinaryKind::Add => (0..n).map(|i| at(xa, i) + at(xb, i)).collect(),
                BinaryKind::Sub => (0..n).map(|i| at(xa, i) - at(xb, i)).collect(),
                BinaryKind::Mul => (0..n).map(|i| at(xa, i) * at(xb, i)).collect(),
                BinaryKind::Div => (0..n).map(|i| at(xa, i) / guard_den(at(xb, i))).collect(),
            };
            Tensor::from_parts(shape, data)
        };
        let tracks = self.graph.any_tracks(&[self.id, rhs.id]);
        Ok(self.graph.push(out, Op::Binary(kind, self.id, rhs.id), tracks))
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>, DiffError> {
        self.binary(BinaryKind::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>, DiffError> {
        self.binary(BinaryKind::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>, DiffError> {
        self.binary(BinaryKind::Mul, rhs)
    }

    /// Division with the denominator magnitude clamped to at least [`DIV_EPS`].
    pub fn div(self, rhs: Var<'g>) -> Result<Var<'g>, DiffError> {
        self.binary(BinaryKind::Div, rhs)
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let s = self.graph.scalar(factor);
        self.mul(s).expect("scalar broadcast never fails")
    }

    pub fn add_scalar(self, value: f64) -> Var<'g> {
        let s = self.graph.scalar(value);
        self.add(s).expect("scalar broadcast never fails")
    }

    /// `value - self`.
    pub fn rsub_scalar(self, value: f64) -> Var<'g> {
        let s = self.graph.scalar(value);
        s.sub(self).expect("scalar broadcast never fails")
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>, DiffError> {
        let (out, m, k, n) = {
            let (a, b) = (self.value_ref(), rhs.value_ref());
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let c = kernels::matmul(a.data(), b.data(), m, k, n);
            (Tensor::from_parts(vec![m, n], c), m, k, n)
        };
        let tracks = self.graph.any_tracks(&[self.id, rhs.id]);
        Ok(self.graph.push(out, Op::MatMul { a: self.id, b: rhs.id, m, k, n }, tracks))
    }

    pub fn sum(self) -> Var<'g> {
        let s: f64 = self.value_ref().data().iter().sum();
        let tracks = self.graph.any_tracks(&[self.id]);
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), tracks)
    }

    /// Arithmetic mean of all elements.
    pub fn mean(self) -> Result<Var<'g>, DiffError> {
        let m = {
            let x = self.value_ref();
            if x.is_empty() {
                return Err(DiffError::contract("mean", "empty tensor"));
            }
            x.data().iter().sum::<f64>() / x.len() as f64
        };
        let tracks = self.graph.any_tracks(&[self.id]);
        Ok(self.graph.push(Tensor::scalar(m), Op::Mean(self.id), tracks))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_row_bias(self, bias: Var<'g>) -> Result<Var<'g>, DiffError> {
        let (out, cols) = {
            let (a, b) = (self.value_ref(), bias.value_ref());
            if a.rank() != 2 || b.len() != a.shape()[1] {
                return Err(DiffError::ShapeMismatch {
                    op: "add_row_bias",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let cols = a.shape()[1];
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(cols) {
                row.iter_mut().zip(b.data()).for_each(|(x, bv)| *x += bv);
            }
            (Tensor::from_parts(a.shape().to_vec(), data), cols)
        };
        let tracks = self.graph.any_tracks(&[self.id, bias.id]);
        Ok(self.graph.push(out, Op::AddRowBias { a: self.id, bias: bias.id, cols }, tracks))
    }

    /// 3×3 zero-padded convolution of a `[C,H,W]` input.
    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, stride: usize) -> Result<Var<'g>, DiffError> {
        let (out, geom) = {
            let (x, w, b) = (self.value_ref(), weight.value_ref(), bias.value_ref());
            let bad = || DiffError::ShapeMismatch { op: "conv2d", lhs: x.shape().to_vec(), rhs: w.shape().to_vec() };
            if x.rank() != 3 || w.rank() != 4 || stride == 0 {
                return Err(bad());
            }
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let ws = w.shape();
            if ws[1] != c || ws[2] != 3 || ws[3] != 3 || b.len() != ws[0] {
                return Err(bad());
            }
            let geom = ConvGeom { in_channels: c, out_channels: ws[0], height: h, width: wd, stride };
            let data = kernels::conv2d(x.data(), w.data(), b.data(), geom);
            (Tensor::from_parts(vec![geom.out_channels, geom.out_height(), geom.out_width()], data), geom)
        };
        let tracks = self.graph.any_tracks(&[self.id, weight.id, bias.id]);
        Ok(self.graph.push(out, Op::Conv2d { input: self.id, weight: weight.id, bias: bias.id, geom }, tracks))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'g>, DiffError> {
        let (out, rows, cols) = {
            let x = self.value_ref();
            if x.rank() != 2 {
                return Err(DiffError::contract("transpose", format!("rank-2 input required, got {:?}", x.shape())));
            }
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    data[c * rows + r] = x.data()[r * cols + c];
                }
            }
            (Tensor::from_parts(vec![cols, rows], data), rows, cols)
        };
        let tracks = self.graph.any_tracks(&[self.id]);
        Ok(self.graph.push(out, Op::Transpose { a: self.id, rows, cols }, tracks))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>, DiffError> {
        let out = self.value_ref().reshaped(shape)?;
        let tracks = self.graph.any_tracks(&[self.id]);
        Ok(self.graph.push(out, Op::Reshape(self.id), tracks))
    }

    /// Joins `[m×p]` and `[m×q]` into `[m×(p+q)]`.
    pub fn concat_cols(self, rhs: Var<'g>) -> Result<Var<'g>, DiffError> {
        let (out, rows, left, right) = {
            let (a, b) = (self.value_ref(), rhs.value_ref());
            if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (rows, left, right) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut data = Vec::with_capacity(rows * (left + right));
            for r in 0..rows {
                data.extend_from_slice(&a.data()[r * left..(r + 1) * left]);
                data.extend_from_slice(&b.data()[r * right..(r + 1) * right]);
            }
            (Tensor::from_parts(vec![rows, left + right], data), rows, left, right)
        };
        let tracks = self.graph.any_tracks(&[self.id, rhs.id]);
        Ok(self.graph.push(out, Op::ConcatCols { a: self.id, b: rhs.id, rows, left, right }, tracks))
    }

    /// Weighted row combination of a `[r×c]` source: one output row per tap list.
    /// An empty tap list yields a zero row.
    pub fn gather_rows(self, taps: RowTaps) -> Result<Var<'g>, DiffError> {
        let (out, cols) = {
            let x = self.value_ref();
            if x.rank() != 2 {
                return Err(DiffError::contract("gather_rows", format!("rank-2 source required, got {:?}", x.shape())));
            }
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            if taps.is_empty() {
                return Err(DiffError::contract("gather_rows", "no output rows"));
            }
            let mut data = vec![0.0; taps.len() * cols];
            for (r, row_taps) in taps.iter().enumerate() {
                let dst = &mut data[r * cols..(r + 1) * cols];
                for &(sr, w) in row_taps {
                    if sr >= rows {
                        return Err(DiffError::contract("gather_rows", format!("row {sr} out of range {rows}")));
                    }
                    let src = &x.data()[sr * cols..(sr + 1) * cols];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
                }
            }
            (Tensor::from_parts(vec![taps.len(), cols], data), cols)
        };
        let tracks = self.graph.any_tracks(&[self.id]);
        Ok(self.graph.push(out, Op::GatherRows { src: self.id, cols, taps }, tracks))
    }
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}
