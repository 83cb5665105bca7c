use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, Operand};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Tanh,
    Exp,
    Log,
    Square,
    Sin,
    Cos,
    Softplus,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Softplus => "softplus",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Tanh => libm::tanh(x),
            Unary::Exp => libm::exp(x),
            Unary::Log => libm::log(x),
            Unary::Square => x * x,
            Unary::Sin => libm::sin(x),
            Unary::Cos => libm::cos(x),
            Unary::Softplus => softplus(x),
        }
    }

    /// d(out)/d(in) given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // subgradient 0 at the kink
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Sin => libm::cos(x),
            Unary::Cos => -libm::sin(x),
            Unary::Softplus => 1.0 / (1.0 + libm::exp(-x)),
        }
    }
}

fn softplus(x: f64) -> f64 {
    let m = if x > 0.0 { x } else { 0.0 };
    m + libm::log1p(libm::exp(-libm::fabs(x)))
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Broadcast(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Gaussian {
        mean: Var,
        log_std: Var,
        noise: Tensor,
    },
    Clip(Var, f64, f64),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` if none reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(like))
    }

    /// Number of nodes that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Append-only record of tensor operations for reverse-mode differentiation.
///
/// Node order is topological by construction. Results of operations whose
/// inputs do not require gradients are stored as plain constants.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownNode(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Value-equal constant; gradient flow stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.node(v)?.value;
        if t.rank() != 2 {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: Vec::new(),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            Operand::plain(self.value(a).data()),
            Operand::plain(self.value(b).data()),
            &mut out,
            false,
        );
        self.push(
            "matmul",
            Tensor::matrix(m, n, out),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "min",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            Op::Min(a, b),
        )
    }

    fn unary(&mut self, u: Unary, x: Var) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| u.apply(v));
        self.push(u.name(), value, Op::Unary(u, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Cos, x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let m = self.node(x)?.value.mean();
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sum of a rank-2 tensor along `axis` (0: over rows, 1: over columns),
    /// keeping the reduced extent as 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.rank2("sum_axis", x)?;
        let t = self.value(x);
        let value = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                        *o += v;
                    }
                }
                Tensor::matrix(1, n, out)
            }
            1 => Tensor::matrix(m, 1, (0..m).map(|i| t.row_slice(i).iter().sum()).collect()),
            _ => {
                return Err(Error::Shape {
                    op: "sum_axis",
                    lhs: t.shape().to_vec(),
                    rhs: vec![axis],
                })
            }
        };
        self.push("sum_axis", value, Op::SumAxis(x, axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenates rank-2 tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of nothing".into()))?;
        let (m0, n0) = self.rank2("concat", first)?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m, n) = self.rank2("concat", p)?;
            let ok = match axis {
                0 => n == n0,
                1 => m == m0,
                _ => false,
            };
            if !ok {
                return Err(shape_err("concat", self.value(first), self.value(p)));
            }
            dims.push((m, n));
        }
        let value = if axis == 0 {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::vstack(&refs)?
        } else {
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(m0 * total);
            for i in 0..m0 {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row_slice(i));
                }
            }
            Tensor::matrix(m0, total, out)
        };
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Expands extents of size 1 to `shape` (rank 2).
    pub fn broadcast(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.rank2("broadcast", x)?;
        if (m != 1 && m != rows) || (n != 1 && n != cols) {
            return Err(Error::Shape {
                op: "broadcast",
                lhs: vec![m, n],
                rhs: vec![rows, cols],
            });
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let si = if m == 1 { 0 } else { i };
            for j in 0..cols {
                let sj = if n == 1 { 0 } else { j };
                out.push(t.data()[si * n + sj]);
            }
        }
        self.push(
            "broadcast",
            Tensor::matrix(rows, cols, out),
            Op::Broadcast(x),
            &[x],
        )
    }

    /// Half-open range `[start, end)` along `axis` of a rank-2 tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.rank2("slice", x)?;
        let extent = if axis == 0 { m } else { n };
        if axis > 1 || start >= end || end > extent {
            return Err(Error::Shape {
                op: "slice",
                lhs: vec![m, n],
                rhs: vec![axis, start, end],
            });
        }
        let t = self.value(x);
        let value = if axis == 0 {
            Tensor::matrix(end - start, n, t.data()[start * n..end * n].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(m * w);
            for i in 0..m {
                out.extend_from_slice(&t.row_slice(i)[start..end]);
            }
            Tensor::matrix(m, w, out)
        };
        self.push(
            "slice",
            value,
            Op::Slice {
                input: x,
                axis,
                start,
            },
            &[x],
        )
    }

    /// Column `j` of a rank-2 tensor as an `[m, 1]` tensor.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        self.slice(x, 1, j, j + 1)
    }

    /// Rows selected by `indices` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.rank2("gather_rows", x)?;
        if indices.is_empty() || indices.iter().any(|&i| i >= m) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: vec![m, n],
                rhs: vec![indices.len()],
            });
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::matrix(indices.len(), n, out);
        self.push(
            "gather_rows",
            value,
            Op::GatherRows(x, indices.to_vec()),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(x)?.value.clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reparametrized Gaussian draw `mean + exp(log_std) * noise`, with the
    /// standard-normal `noise` supplied by the caller.
    pub fn gaussian_sample(&mut self, mean: Var, log_std: Var, noise: &Tensor) -> Result<Var> {
        let (tm, ts) = (&self.node(mean)?.value, &self.node(log_std)?.value);
        if tm.shape() != ts.shape() {
            return Err(shape_err("gaussian_sample", tm, ts));
        }
        if tm.shape() != noise.shape() {
            return Err(shape_err("gaussian_sample", tm, noise));
        }
        let data = tm
            .data()
            .iter()
            .zip(ts.data())
            .zip(noise.data())
            .map(|((&m, &s), &e)| m + libm::exp(s) * e)
            .collect();
        let value = Tensor::new(tm.shape(), data)?;
        self.push(
            "gaussian_sample",
            value,
            Op::Gaussian {
                mean,
                log_std,
                noise: noise.clone(),
            },
            &[mean, log_std],
        )
    }

    /// Clamps to `[lo, hi]`; gradient passes only inside the interval.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.node(x)?.value.map(|v| v.clamp(lo, hi));
        self.push("clip", value, Op::Clip(x, lo, hi), &[x])
    }

    /// `x @ w + b` with `b` a `[1, out]` row broadcast over the batch.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let (m, n) = self.rank2("affine", xw)?;
        let bb = self.broadcast(b, m, n)?;
        self.add(xw, bb)
    }

    /// Reverse pass from a scalar `root`. Consumes the tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_node = self.node(root)?;
        if !root_node.value.is_scalar() {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let (root_grad, root_rg) = (
            Tensor::full(root_node.value.shape(), 1.0),
            root_node.requires_grad,
        );
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !root_rg {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(root_grad);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        Operand::plain(g.data()),
                        Operand::t(val(*b).data()),
                        &mut da,
                        false,
                    );
                    accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        Operand::t(val(*a).data()),
                        Operand::plain(g.data()),
                        &mut db,
                        false,
                    );
                    accumulate(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, zip_map(g, val(*b), |gv, bv| gv * bv));
                }
                if rg(*b) {
                    accumulate(grads, *b, zip_map(g, val(*a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, zip_map(g, val(*b), |gv, bv| gv / bv));
                }
                if rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let out = &node.value;
                    let d = zip3_map(g, out, val(*b), |gv, q, bv| -gv * q / bv);
                    accumulate(grads, *b, d);
                }
            }
            Op::Min(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if rg(*a) {
                    let d = zip3_map(g, ta, tb, |gv, x, y| if x <= y { gv } else { 0.0 });
                    accumulate(grads, *a, d);
                }
                if rg(*b) {
                    let d = zip3_map(g, ta, tb, |gv, x, y| if x <= y { 0.0 } else { gv });
                    accumulate(grads, *b, d);
                }
            }
            Op::Unary(u, x) => {
                if rg(*x) {
                    let d = zip3_map(g, val(*x), &node.value, |gv, xv, yv| {
                        gv * u.derivative(xv, yv)
                    });
                    accumulate(grads, *x, d);
                }
            }
            Op::Scale(x, c) => {
                if rg(*x) {
                    accumulate(grads, *x, g.map(|v| v * c));
                }
            }
            Op::AddScalar(x) => {
                if rg(*x) {
                    accumulate(grads, *x, g.clone());
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if rg(*x) {
                    let t = val(*x);
                    let s = if matches!(node.op, Op::Mean(_)) {
                        g.item() / t.len() as f64
                    } else {
                        g.item()
                    };
                    accumulate(grads, *x, Tensor::full(t.shape(), s));
                }
            }
            Op::SumAxis(x, axis) => {
                if rg(*x) {
                    let t = val(*x);
                    let (m, n) = (t.rows(), t.cols());
                    let mut d = Vec::with_capacity(m * n);
                    for i in 0..m {
                        for j in 0..n {
                            d.push(if *axis == 0 { g.data()[j] } else { g.data()[i] });
                        }
                    }
                    accumulate(grads, *x, Tensor::matrix(m, n, d));
                }
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let t = val(p);
                    let (m, n) = (t.rows(), t.cols());
                    if rg(p) {
                        let d = if *axis == 0 {
                            let c = g.cols();
                            g.data()[offset * c..(offset + m) * c].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(m * n);
                            for i in 0..m {
                                d.extend_from_slice(&g.row_slice(i)[offset..offset + n]);
                            }
                            d
                        };
                        accumulate(grads, p, Tensor::matrix(m, n, d));
                    }
                    offset += if *axis == 0 { m } else { n };
                }
            }
            Op::Broadcast(x) => {
                if rg(*x) {
                    let t = val(*x);
                    let (m, n) = (t.rows(), t.cols());
                    let (rows, cols) = (g.rows(), g.cols());
                    let mut d = vec![0.0; m * n];
                    for i in 0..rows {
                        let si = if m == 1 { 0 } else { i };
                        for j in 0..cols {
                            let sj = if n == 1 { 0 } else { j };
                            d[si * n + sj] += g.data()[i * cols + j];
                        }
                    }
                    accumulate(grads, *x, Tensor::matrix(m, n, d));
                }
            }
            Op::Slice { input, axis, start } => {
                if rg(*input) {
                    let t = val(*input);
                    let (m, n) = (t.rows(), t.cols());
                    let mut d = vec![0.0; m * n];
                    if *axis == 0 {
                        d[start * n..start * n + g.len()].copy_from_slice(g.data());
                    } else {
                        let w = g.cols();
                        for i in 0..m {
                            d[i * n + start..i * n + start + w].copy_from_slice(g.row_slice(i));
                        }
                    }
                    accumulate(grads, *input, Tensor::matrix(m, n, d));
                }
            }
            Op::GatherRows(x, indices) => {
                if rg(*x) {
                    let t = val(*x);
                    let n = t.cols();
                    let mut d = vec![0.0; t.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for (dst, src) in d[i * n..(i + 1) * n].iter_mut().zip(g.row_slice(r)) {
                            *dst += src;
                        }
                    }
                    accumulate(grads, *x, Tensor::matrix(t.rows(), n, d));
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    let t = val(*x);
                    let d = Tensor::new(t.shape(), g.data().to_vec()).expect("reshape grad");
                    accumulate(grads, *x, d);
                }
            }
            Op::Gaussian {
                mean,
                log_std,
                noise,
            } => {
                if rg(*mean) {
                    accumulate(grads, *mean, g.clone());
                }
                if rg(*log_std) {
                    let d = zip3_map(g, val(*log_std), noise, |gv, s, e| gv * libm::exp(s) * e);
                    accumulate(grads, *log_std, d);
                }
            }
            Op::Clip(x, lo, hi) => {
                if rg(*x) {
                    let d = zip_map(
                        g,
                        val(*x),
                        |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 },
                    );
                    accumulate(grads, *x, d);
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(b.shape(), data).expect("same shape")
}

fn zip3_map(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(b.shape(), data).expect("same shape")
}
