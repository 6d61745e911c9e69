use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::kernels::{gemm, reduce_to};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Backward rule for an operation implemented outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the tape only needs the vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Scale(f64),
    Offset(f64),
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Sqrt,
    Square,
    Recip,
    Clamp(f64, f64),
}

enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    MatMul(usize, usize),
    Sum(usize),
    SumRows(usize),
    Transpose(usize),
    Reshape(usize),
    Gather(usize, Rc<[usize]>),
    SegmentSum(usize, Rc<[usize]>),
    ConcatCols(usize, usize),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation, replayed in reverse by
/// [`Tape::backward`]. Built fresh for every training step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Result of a backward pass: one gradient slot per node that requires it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a parameter leaf; zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    /// Number of nodes whose backward rule ran.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Leaf that receives a gradient slot.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without a gradient slot.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn check(&self, var: Var<'_>) -> Result<()> {
        if std::ptr::eq(var.tape, self) {
            Ok(())
        } else {
            Err(Error::Contract("variable belongs to a different tape".into()))
        }
    }

    /// Record an externally computed operation together with its backward rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var<'t>> {
        for v in inputs {
            self.check(*v)?;
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(output, Op::Custom(ids, op), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut visited = 0;

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            let mut accumulate = |input: usize, delta: Tensor| {
                if !nodes[input].requires_grad {
                    return;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Binary(kind, a, b) => {
                    let (ga, gb) = binary_backward(*kind, val(*a), val(*b), &g);
                    if let Some(ga) = ga {
                        accumulate(*a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(*b, gb);
                    }
                }
                Op::Unary(kind, a) => {
                    accumulate(*a, unary_backward(*kind, val(*a), &node.value, &g));
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2().expect("matmul lhs");
                    let (_, n) = val(*b).dims2().expect("matmul rhs");
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut ga, 0.0);
                        accumulate(*a, Tensor::from_parts(vec![m, k], ga));
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut gb, 0.0);
                        accumulate(*b, Tensor::from_parts(vec![k, n], gb));
                    }
                }
                Op::Sum(a) => {
                    accumulate(*a, Tensor::full(val(*a).shape(), g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).dims2().expect("sum_rows input");
                    let mut out = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        out.extend_from_slice(g.data());
                    }
                    accumulate(*a, Tensor::from_parts(vec![r, c], out));
                }
                Op::Transpose(a) => {
                    let (r, c) = val(*a).dims2().expect("transpose input");
                    accumulate(*a, transpose(c, r, g.data()));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(*a, Tensor::from_parts(shape, g.into_data()));
                }
                Op::Gather(a, index) => {
                    let src = val(*a);
                    let mut out = vec![0.0; src.len()];
                    for (k, &i) in index.iter().enumerate() {
                        out[i] += g.data()[k];
                    }
                    accumulate(*a, Tensor::from_parts(src.shape().to_vec(), out));
                }
                Op::SegmentSum(a, seg) => {
                    let (r, c) = val(*a).dims2().expect("segment_sum input");
                    let mut out = Vec::with_capacity(r * c);
                    for &s in seg.iter() {
                        out.extend_from_slice(g.row(s));
                    }
                    accumulate(*a, Tensor::from_parts(vec![r, c], out));
                }
                Op::ConcatCols(a, b) => {
                    let (r, p) = val(*a).dims2().expect("concat lhs");
                    let (_, q) = val(*b).dims2().expect("concat rhs");
                    let mut ga = Vec::with_capacity(r * p);
                    let mut gb = Vec::with_capacity(r * q);
                    for row in g.data().chunks_exact(p + q) {
                        ga.extend_from_slice(&row[..p]);
                        gb.extend_from_slice(&row[p..]);
                    }
                    accumulate(*a, Tensor::from_parts(vec![r, p], ga));
                    accumulate(*b, Tensor::from_parts(vec![r, q], gb));
                }
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    assert_eq!(gs.len(), inputs.len(), "{} returned wrong arity", op.name());
                    for (&i, gi) in inputs.iter().zip(gs) {
                        assert_eq!(gi.shape(), val(i).shape(), "{} gradient shape", op.name());
                        accumulate(i, gi);
                    }
                }
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }
}

fn transpose(r: usize, c: usize, x: &[f64]) -> Tensor {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    long.len() >= short.len() && long[long.len() - short.len()..] == *short
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if is_suffix(a, b) {
        Ok(a.to_vec())
    } else if is_suffix(b, a) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn binary_forward(kind: Binary, a: &Tensor, b: &Tensor, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let (la, lb) = (ad.len(), bd.len());
    let f = match kind {
        Binary::Add => |x: f64, y: f64| x + y,
        Binary::Sub => |x: f64, y: f64| x - y,
        Binary::Mul => |x: f64, y: f64| x * y,
        Binary::Div => |x: f64, y: f64| x / y,
    };
    let data = if la == n && lb == n {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n).map(|k| f(ad[k % la], bd[k % lb])).collect()
    };
    Tensor::from_parts(shape, data)
}

fn binary_backward(
    kind: Binary,
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
) -> (Option<Tensor>, Option<Tensor>) {
    let gd = g.data();
    let n = gd.len();
    let (ad, bd) = (a.data(), b.data());
    let (la, lb) = (ad.len(), bd.len());
    let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
        Binary::Add => (gd.to_vec(), gd.to_vec()),
        Binary::Sub => (gd.to_vec(), gd.iter().map(|x| -x).collect()),
        Binary::Mul => (
            (0..n).map(|k| gd[k] * bd[k % lb]).collect(),
            (0..n).map(|k| gd[k] * ad[k % la]).collect(),
        ),
        Binary::Div => (
            (0..n).map(|k| gd[k] / bd[k % lb]).collect(),
            (0..n)
                .map(|k| {
                    let y = bd[k % lb];
                    -gd[k] * ad[k % la] / (y * y)
                })
                .collect(),
        ),
    };
    (
        Some(Tensor::from_parts(a.shape().to_vec(), reduce_to(&ga, la))),
        Some(Tensor::from_parts(b.shape().to_vec(), reduce_to(&gb, lb))),
    )
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Scale(c) => c * x,
        Unary::Offset(c) => x + c,
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Recip => 1.0 / x,
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
    }
}

fn unary_backward(kind: Unary, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let d: Vec<f64> = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&x, &y), &g)| match kind {
            Unary::Neg => -g,
            Unary::Scale(c) => c * g,
            Unary::Offset(_) => g,
            Unary::Exp => g * y,
            Unary::Log => g / x,
            Unary::Sigmoid => g * y * (1.0 - y),
            Unary::Tanh => g * (1.0 - y * y),
            Unary::Sqrt => 0.5 * g / y,
            Unary::Square => 2.0 * x * g,
            Unary::Recip => -g * y * y,
            Unary::Clamp(lo, hi) => {
                if (lo..=hi).contains(&x) {
                    g
                } else {
                    0.0
                }
            }
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), d)
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn binary(self, kind: Binary, op: &'static str, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(other)?;
        let out = {
            let a = self.value();
            let b = other.value();
            let shape = broadcast_shape(op, a.shape(), b.shape())?;
            binary_forward(kind, &a, &b, shape)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::Binary(kind, self.id, other.id), rg))
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let out = self.value().map(|x| unary_forward(kind, x));
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(out, Op::Unary(kind, self.id), rg)
    }

    /// Elementwise sum; either operand may be broadcast over leading dimensions.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Add, "add", other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Sub, "sub", other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Mul, "mul", other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Div, "div", other)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Unary::Offset(c))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(other)?;
        let out = {
            let a = self.value();
            let b = other.value();
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
            Tensor::from_parts(vec![m, n], c)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    /// Column sums of a matrix: `[r, c] -> [c]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (_, c) = a.dims2()?;
            let mut s = vec![0.0; c];
            for row in a.data().chunks_exact(c) {
                for (acc, x) in s.iter_mut().zip(row) {
                    *acc += x;
                }
            }
            Tensor::from_parts(vec![c], s)
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::SumRows(self.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (r, c) = a.dims2()?;
            transpose(r, c, a.data())
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::Transpose(self.id), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshaped(shape.to_vec())?;
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::Reshape(self.id), rg))
    }

    /// Repeat along new leading dimensions so the result has `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let src = self.shape();
        if !is_suffix(shape, &src) {
            return Err(Error::shape("broadcast_to", &src, shape));
        }
        let n: usize = src.iter().product();
        let total: usize = shape.iter().product();
        let index: Vec<usize> = (0..total).map(|k| k % n).collect();
        self.gather(&index, shape)
    }

    /// `out.flat[k] = self.flat[index[k]]`, reshaped to `shape`.
    pub fn gather(self, index: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        let total: usize = shape.iter().product();
        if total != index.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let out = {
            let a = self.value();
            let src = a.data();
            if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
                return Err(Error::Contract(format!(
                    "gather index {bad} out of range for {} elements",
                    src.len()
                )));
            }
            Tensor::from_parts(shape.to_vec(), index.iter().map(|&i| src[i]).collect())
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::Gather(self.id, index.into()), rg))
    }

    /// Select rows of a matrix (with repetition allowed).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let (r, c) = self.value().dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row {bad} out of range for {r} rows")));
        }
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&i| (0..c).map(move |j| i * c + j))
            .collect();
        self.gather(&index, &[rows.len(), c])
    }

    /// Sum rows into `segments` buckets: row `i` lands in bucket `segment[i]`.
    pub fn segment_sum(self, segment: &[usize], segments: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (r, c) = a.dims2()?;
            if segment.len() != r {
                return Err(Error::shape("segment_sum", a.shape(), &[segment.len()]));
            }
            if segments == 0 || segment.iter().any(|&s| s >= segments) {
                return Err(Error::Contract("segment id out of range".into()));
            }
            let mut s = vec![0.0; segments * c];
            for (row, &seg) in a.data().chunks_exact(c).zip(segment) {
                for (acc, x) in s[seg * c..(seg + 1) * c].iter_mut().zip(row) {
                    *acc += x;
                }
            }
            Tensor::from_parts(vec![segments, c], s)
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::SegmentSum(self.id, segment.into()), rg))
    }

    /// `[r, p] ++ [r, q] -> [r, p + q]`.
    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check(other)?;
        let out = {
            let a = self.value();
            let b = other.value();
            let (r, p) = a.dims2()?;
            let (r2, q) = b.dims2()?;
            if r != r2 {
                return Err(Error::shape("concat_cols", a.shape(), b.shape()));
            }
            let mut d = Vec::with_capacity(r * (p + q));
            for i in 0..r {
                d.extend_from_slice(a.row(i));
                d.extend_from_slice(b.row(i));
            }
            Tensor::from_parts(vec![r, p + q], d)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::ConcatCols(self.id, other.id), rg))
    }
}
