use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::numerics::erf;
use std::f64::consts::PI;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Tanh,
    Relu,
    Atan,
    Exp,
    Log,
    Softplus,
    Erf,
    Square,
    XLogX,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RepeatRows(Var, usize),
    Reshape(Var),
    Transpose(Var),
    Cumsum(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Binary(_, a, b) | Op::MatMul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::ConcatCols(parts) => parts.iter().copied().for_each(f),
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SliceCols(a, _)
            | Op::RepeatRows(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Cumsum(a)
            | Op::LogSoftmax(a)
            | Op::Gather(a, _) => f(*a),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Depends on at least one non-constant leaf, so needs an adjoint.
    tracked: bool,
}

/// Append-only record of a computation. Inputs of a node always precede it,
/// so the backward sweep is a single pass in reverse append order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], one per node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.adjoints[v.0]
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let (r, c) = self.adjoints[v.0].shape();
        std::mem::replace(&mut self.adjoints[v.0], Tensor::zeros(r, c))
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        detail: format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1),
    }
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

/// Sums `g` down to `shape`, undoing a broadcast.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    if shape == (1, g.cols()) {
        let mut out = vec![0.0; g.cols()];
        for row in g.data().chunks(g.cols().max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        return Tensor::row(&out);
    }
    if shape == (g.rows(), 1) {
        let sums: Vec<f64> = g.data().chunks(g.cols().max(1)).map(|row| row.iter().sum()).collect();
        return Tensor::column(&sums);
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        let rr = if shape.0 == 1 { 0 } else { r };
        for c in 0..g.cols() {
            let cc = if shape.1 == 1 { 0 } else { c };
            let v = out.get(rr, cc) + g.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

/// [`reduce_to`] that hands `g` back untouched when no reduction is needed.
fn reduce_owned(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        reduce_to(&g, shape)
    }
}

/// [`mul_broadcast`] reusing the buffer of `g`.
fn mul_in_place(mut g: Tensor, v: &Tensor) -> Tensor {
    let cols = g.cols().max(1);
    match v.shape() {
        s if s == g.shape() => g.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a *= b),
        (1, c) if c == g.cols() => {
            for row in g.data_mut().chunks_mut(cols) {
                row.iter_mut().zip(v.data()).for_each(|(a, b)| *a *= b);
            }
        }
        (r, 1) if r == g.rows() => {
            for (row, b) in g.data_mut().chunks_mut(cols).zip(v.data()) {
                row.iter_mut().for_each(|a| *a *= b);
            }
        }
        _ => return mul_broadcast(&g, v),
    }
    g
}

/// `g ⊙ v` with `v` broadcast to the shape of `g`.
fn mul_broadcast(g: &Tensor, v: &Tensor) -> Tensor {
    let (rows, cols) = g.shape();
    if v.shape() == (rows, cols) {
        let data = g.data().iter().zip(v.data()).map(|(a, b)| a * b).collect();
        return Tensor::new(rows, cols, data).expect("same shape");
    }
    zip_broadcast(rows, cols, g, v, |a, b| a * b)
}

/// `rows × cols` tensor of `f(a, b)`, each operand broadcast along its unit
/// dimensions.
fn zip_broadcast(rows: usize, cols: usize, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    fn row_of(t: &Tensor, r: usize) -> &[f64] {
        let (tr, tc) = t.shape();
        let r = if tr == 1 { 0 } else { r };
        &t.data()[r * tc..(r + 1) * tc]
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (ra, rb) = (row_of(a, r), row_of(b, r));
        match (ra.len() == cols, rb.len() == cols) {
            (true, true) => data.extend(ra.iter().zip(rb).map(|(&x, &y)| f(x, y))),
            (true, false) => data.extend(ra.iter().map(|&x| f(x, rb[0]))),
            (false, true) => data.extend(rb.iter().map(|&y| f(ra[0], y))),
            (false, false) => data.extend(std::iter::repeat(f(ra[0], rb[0])).take(cols)),
        }
    }
    Tensor::new(rows, cols, data).expect("broadcast shape")
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const XLOGX_FLOOR: f64 = 1e-300;

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let mut tracked = matches!(op, Op::Leaf);
        op.for_each_input(|v| tracked |= self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that receives no adjoint; its gradient reads back as zeros.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| x.max(0.0),
            Unary::Atan => f64::atan,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Softplus => softplus,
            Unary::Erf => erf,
            Unary::Square => |x| x * x,
            Unary::XLogX => |x| if x > 0.0 { x * x.ln() } else { 0.0 },
        };
        let value = self.nodes[a.0].value.map(f);
        self.push(value, Op::Unary(kind, a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    /// Rectifier; the derivative at exactly zero is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn atan(&mut self, a: Var) -> Var {
        self.unary(Unary::Atan, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    pub fn erf(&mut self, a: Var) -> Var {
        self.unary(Unary::Erf, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    /// `x ln x`, extended by 0 for `x <= 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(Unary::XLogX, a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (rows, cols) = match (broadcast_dim(sa.0, sb.0), broadcast_dim(sa.1, sb.1)) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                let name = match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                    Binary::Div => "div",
                };
                return Err(shape_err(name, sa, sb));
            }
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if sa == sb {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| apply(kind, x, y))
                .collect();
            Tensor::new(rows, cols, data)?
        } else {
            zip_broadcast(rows, cols, va, vb, |x, y| apply(kind, x, y))
        };
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    /// Elementwise sum. Either operand may be broadcast along a unit dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| k * x);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + k);
        self.push(value, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm(1.0, &self.nodes[a.0].value, false, &self.nodes[b.0].value, false, 0.0, &mut out);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Sum of all entries, as a `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row, giving an `n × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let data: Vec<f64> = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        self.push(Tensor::column(&data), Op::SumRows(a))
    }

    /// Sums each column, giving a `1 × m` row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; v.cols()];
        for r in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        self.push(Tensor::row(&out), Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let rows = self.shape(*first).0;
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(shape_err("concat", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row_slice(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start > end || end > cols {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("columns {start}..{end} of {cols}"),
            });
        }
        let v = &self.nodes[a.0].value;
        let value = Tensor::from_fn(rows, end - start, |r, c| v.get(r, start + c));
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(v.rows() * times, v.cols(), data).expect("repeat shape");
        self.push(value, Op::RepeatRows(a, times))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(rows, cols)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Running sum along each row.
    pub fn cumsum(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            let mut acc = 0.0;
            for x in row {
                acc += *x;
                *x = acc;
            }
        }
        self.push(value, Op::Cumsum(a))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row {
                *x -= lse;
            }
        }
        self.push(value, Op::LogSoftmax(a))
    }

    /// Picks `a[r, index[r]]` for every row, giving an `n × 1` column.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if index.len() != rows {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("{} indices for {rows} rows", index.len()),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("index {bad} out of {cols} columns"),
            });
        }
        let v = &self.nodes[a.0].value;
        let data: Vec<f64> = index.iter().enumerate().map(|(r, &c)| v.get(r, c)).collect();
        Ok(self.push(Tensor::column(&data), Op::Gather(a, index.to_vec())))
    }

    /// Reverse sweep from a scalar root. Every node receives an adjoint of
    /// its own shape; nodes the root does not depend on get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.sweep(root, true)
    }

    /// Like [`Tape::backward`], but only leaf adjoints are kept; the adjoint
    /// of every other node is an empty tensor. Intermediate adjoints are
    /// freed as soon as they have been propagated.
    pub fn backward_leaves(&self, root: Var) -> Result<Gradients> {
        self.sweep(root, false)
    }

    fn sweep(&self, root: Var, keep_all: bool) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::Shape {
                op: "backward",
                detail: format!("root must be 1x1, got {r}x{c}"),
            });
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[root.0] = Some(Tensor::scalar(1.0));

        let tracked: Vec<bool> = self.nodes.iter().map(|n| n.tracked).collect();
        let accumulate = |adj: &mut [Option<Tensor>], v: Var, g: Tensor| {
            if !tracked[v.0] {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = adj.split_at_mut(i);
            let Some(mut g) = upper[0].take() else { continue };
            if keep_all {
                upper[0] = Some(g.clone());
            }
            let adj = lower;
            match &node.op {
                Op::Leaf => {}
                Op::Unary(kind, a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &node.value;
                    for ((g, &x), &y) in g.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                        *g *= unary_grad(*kind, x, y);
                    }
                    accumulate(adj, *a, g);
                }
                Op::Binary(kind, a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (sa, sb) = (va.shape(), vb.shape());
                    let (need_a, need_b) = (self.nodes[a.0].tracked, self.nodes[b.0].tracked);
                    match kind {
                        Binary::Add | Binary::Sub => {
                            let gb = need_b.then(|| {
                                let gb = reduce_to(&g, sb);
                                if *kind == Binary::Sub {
                                    gb.map(|x| -x)
                                } else {
                                    gb
                                }
                            });
                            if need_a {
                                accumulate(adj, *a, reduce_owned(g, sa));
                            }
                            if let Some(gb) = gb {
                                accumulate(adj, *b, gb);
                            }
                        }
                        Binary::Mul => {
                            let gb = need_b.then(|| reduce_owned(mul_broadcast(&g, va), sb));
                            if need_a {
                                accumulate(adj, *a, reduce_owned(mul_in_place(g, vb), sa));
                            }
                            if let Some(gb) = gb {
                                accumulate(adj, *b, gb);
                            }
                        }
                        Binary::Div => {
                            let (rows, cols) = g.shape();
                            let gb = need_b.then(|| {
                                let gx = zip_broadcast(rows, cols, &g, va, |g, x| g * x);
                                reduce_owned(zip_broadcast(rows, cols, &gx, vb, |gx, y| -gx / (y * y)), sb)
                            });
                            if need_a {
                                let ga = zip_broadcast(rows, cols, &g, vb, |g, y| g / y);
                                accumulate(adj, *a, reduce_owned(ga, sa));
                            }
                            if let Some(gb) = gb {
                                accumulate(adj, *b, gb);
                            }
                        }
                    }
                }
                Op::Scale(a, k) => {
                    g.data_mut().iter_mut().for_each(|x| *x *= k);
                    accumulate(adj, *a, g);
                }
                Op::AddConst(a) => accumulate(adj, *a, g),
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    // gemm accumulates straight into an existing adjoint
                    if self.nodes[a.0].tracked {
                        match &mut adj[a.0] {
                            Some(existing) => gemm(1.0, &g, false, vb, true, 1.0, existing),
                            slot => {
                                let mut ga = Tensor::zeros(va.rows(), va.cols());
                                gemm(1.0, &g, false, vb, true, 0.0, &mut ga);
                                *slot = Some(ga);
                            }
                        }
                    }
                    if self.nodes[b.0].tracked {
                        match &mut adj[b.0] {
                            Some(existing) => gemm(1.0, va, true, &g, false, 1.0, existing),
                            slot => {
                                let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                                gemm(1.0, va, true, &g, false, 0.0, &mut gb);
                                *slot = Some(gb);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(adj, *a, Tensor::filled(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut data = Vec::with_capacity(r * c);
                    for &v in g.data() {
                        data.extend(std::iter::repeat(v).take(c));
                    }
                    accumulate(adj, *a, Tensor::new(r, c, data)?);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let mut data = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        data.extend_from_slice(g.data());
                    }
                    accumulate(adj, *a, Tensor::new(r, c, data)?);
                }
                Op::ConcatCols(parts) => {
                    let width = g.cols().max(1);
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let mut data = Vec::with_capacity(r * c);
                        for row in g.data().chunks(width) {
                            data.extend_from_slice(&row[offset..offset + c]);
                        }
                        offset += c;
                        accumulate(adj, *p, Tensor::new(r, c, data)?);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let w = g.cols();
                    let mut full = Tensor::zeros(r, c);
                    if w > 0 {
                        for (dst, src) in full.data_mut().chunks_mut(c).zip(g.data().chunks(w)) {
                            dst[*start..start + w].copy_from_slice(src);
                        }
                    }
                    accumulate(adj, *a, full);
                }
                Op::RepeatRows(a, times) => {
                    let (r, c) = self.shape(*a);
                    let mut out = Tensor::zeros(r, c);
                    for t in 0..*times {
                        let block = &g.data()[t * r * c..(t + 1) * r * c];
                        for (o, x) in out.data_mut().iter_mut().zip(block) {
                            *o += x;
                        }
                    }
                    accumulate(adj, *a, out);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(adj, *a, g.reshaped(r, c)?);
                }
                Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
                Op::Cumsum(a) => {
                    // reverse running sum
                    let mut out = g;
                    let cols = out.cols();
                    for row in out.data_mut().chunks_mut(cols.max(1)) {
                        let mut acc = 0.0;
                        for x in row.iter_mut().rev() {
                            acc += *x;
                            *x = acc;
                        }
                    }
                    accumulate(adj, *a, out);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut out = g;
                    for (grow, yrow) in out.data_mut().chunks_mut(cols.max(1)).zip(y.data().chunks(cols.max(1))) {
                        let total: f64 = grow.iter().sum();
                        for (gx, yx) in grow.iter_mut().zip(yrow) {
                            *gx -= yx.exp() * total;
                        }
                    }
                    accumulate(adj, *a, out);
                }
                Op::Gather(a, index) => {
                    let (r, c) = self.shape(*a);
                    let mut out = Tensor::zeros(r, c);
                    for (row, &col) in index.iter().enumerate() {
                        out.set(row, col, g.get(row, 0));
                    }
                    accumulate(adj, *a, out);
                }
            }
        }

        let adjoints = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(a, n)| match a {
                Some(a) => a,
                None if keep_all || matches!(n.op, Op::Leaf) => Tensor::zeros(n.value.rows(), n.value.cols()),
                None => Tensor::zeros(0, 0),
            })
            .collect();
        Ok(Gradients { adjoints })
    }
}

#[inline]
fn apply(kind: Binary, x: f64, y: f64) -> f64 {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
    }
}

#[inline]
fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Atan => 1.0 / (1.0 + x * x),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Softplus => sigmoid(x),
        Unary::Erf => 2.0 / PI.sqrt() * (-x * x).exp(),
        Unary::Square => 2.0 * x,
        // y = x ln x, so y / x recovers ln x without another log
        Unary::XLogX => {
            if x >= XLOGX_FLOOR {
                y / x + 1.0
            } else {
                XLOGX_FLOOR.ln() + 1.0
            }
        }
    }
}
