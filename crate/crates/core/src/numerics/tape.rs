//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to the
//! owning [`Tape`]. [`Tape::backward`] replays the nodes in reverse order and
//! accumulates gradients additively, so a value consumed `k` times receives the
//! sum of its `k` contributions.

use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{
    log_softmax_row, matmul_at_into, matmul_bt_into, sigmoid, softmax_row, Scalar,
    Tensor,
};
use crate::error::{LasError, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    Rows(usize, usize),
    StackRows(Vec<usize>),
    Reshape(usize),
    PadRows(usize),
    Pick(usize, usize),
    Sum(usize),
    AddN(Vec<usize>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded record of a forward computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to a leaf, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }

    /// Node ids whose backward rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn shape_err(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> LasError {
    LasError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf: gradients flow into it.
    pub fn param(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(Arc::new(value), true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(Arc::new(value), false)
    }

    pub fn leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(LasError::NonFinite { op: "leaf" });
        }
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    fn push_node(&self, value: Arc<Tensor<T>>, op: Op, requires_grad: bool) -> Var<'_, T> {
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

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op, inputs: &[usize]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(LasError::NonFinite { op: op_name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_node(Arc::new(value), op, requires_grad))
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenate along columns; every part must have the same row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(LasError::EmptyInput("concat"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        let mut cols = 0;
        for v in &values {
            if v.rows() != rows {
                return Err(shape_err("concat", &values[0], v));
            }
            cols += v.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first
            .tape
            .push("concat", Tensor::matrix(rows, cols, out)?, Op::Concat(ids.clone()), &ids)
    }

    /// Stack parts vertically; every part must have the same column count.
    pub fn stack_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(LasError::EmptyInput("stack_rows"));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for v in &values {
            if v.cols() != cols {
                return Err(shape_err("stack_rows", &values[0], v));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push("stack_rows", Tensor::matrix(rows, cols, out)?, Op::StackRows(ids.clone()), &ids)
    }

    /// Elementwise sum of same-shaped parts.
    pub fn add_n<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(LasError::EmptyInput("add_n"));
        }
        let mut acc = (*parts[0].value()).clone();
        for p in &parts[1..] {
            let v = p.value();
            if v.shape() != acc.shape() {
                return Err(shape_err("add_n", &acc, &v));
            }
            acc.add_assign(&v);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push("add_n", acc, Op::AddN(ids.clone()), &ids)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(LasError::Dimension {
                op: "backward",
                lhs: nodes[loss.id].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let mut visited = Vec::new();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            visited.push(id);
            let g = g.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = av.dims2();
                    let n = bv.cols();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        matmul_bt_into(g, bv.data(), ga, m, k, n);
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        matmul_at_into(av.data(), g, gb, m, k, n);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = nodes[*a].value.dims2();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &x in &[*a, *b] {
                        let len = nodes[x].value.len();
                        if let Some(gx) = slot(&mut grads, &nodes, x) {
                            if len == g.len() {
                                add_into(gx, g);
                            } else {
                                gx[0] = gx[0] + g.iter().copied().sum();
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (x, other) in [(*a, *b), (*b, *a)] {
                        let len = nodes[x].value.len();
                        let ov = Arc::clone(&nodes[other].value);
                        if let Some(gx) = slot(&mut grads, &nodes, x) {
                            if len == g.len() {
                                if ov.len() == g.len() {
                                    for ((d, gi), o) in gx.iter_mut().zip(g).zip(ov.data()) {
                                        *d = *d + *gi * *o;
                                    }
                                } else {
                                    let o = ov.data()[0];
                                    for (d, gi) in gx.iter_mut().zip(g) {
                                        *d = *d + *gi * o;
                                    }
                                }
                            } else {
                                let s: T = g.iter().zip(ov.data()).map(|(gi, o)| *gi * *o).sum();
                                gx[0] = gx[0] + s;
                            }
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    let n = nodes[*r].value.len();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        add_into(ga, g);
                    }
                    if let Some(gr) = slot(&mut grads, &nodes, *r) {
                        for chunk in g.chunks(n) {
                            add_into(gr, chunk);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let c = T::cast(*c);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for (d, gi) in ga.iter_mut().zip(g) {
                            *d = *d + c * *gi;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = Arc::clone(&node.value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y.data()) {
                            *d = *d + *gi * (T::one() - *yi * *yi);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = Arc::clone(&node.value);
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y.data()) {
                            *d = *d + *gi * *yi * (T::one() - *yi);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = Arc::clone(&node.value);
                    let n = y.cols();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for ((grow, yrow), drow) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                            let dot: T = grow.iter().zip(yrow).map(|(gi, yi)| *gi * *yi).sum();
                            for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d = *d + *yi * (*gi - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = Arc::clone(&node.value);
                    let n = y.cols();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for ((grow, yrow), drow) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                            let total: T = grow.iter().copied().sum();
                            for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d = *d + *gi - yi.exp() * total;
                            }
                        }
                    }
                }
                Op::Concat(ids) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &x in ids {
                        let c = nodes[x].value.cols();
                        if let Some(gx) = slot(&mut grads, &nodes, x) {
                            for r in 0..rows {
                                add_into(&mut gx[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                            }
                        }
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let rows = node.value.rows();
                    let w = node.value.cols();
                    let c = nodes[*a].value.cols();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for r in 0..rows {
                            add_into(&mut ga[r * c + start..r * c + start + w], &g[r * w..(r + 1) * w]);
                        }
                    }
                }
                Op::Rows(a, start) => {
                    let c = node.value.cols();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        add_into(&mut ga[start * c..start * c + g.len()], g);
                    }
                }
                Op::StackRows(ids) => {
                    let mut offset = 0;
                    for &x in ids {
                        let len = nodes[x].value.len();
                        if let Some(gx) = slot(&mut grads, &nodes, x) {
                            add_into(gx, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        add_into(ga, g);
                    }
                }
                Op::PadRows(a) => {
                    let len = nodes[*a].value.len();
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        add_into(ga, &g[..len]);
                    }
                }
                Op::Pick(a, idx) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga[*idx] = ga[*idx] + g[0];
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for d in ga.iter_mut() {
                            *d = *d + g[0];
                        }
                    }
                }
                Op::AddN(ids) => {
                    for &x in ids {
                        if let Some(gx) = slot(&mut grads, &nodes, x) {
                            add_into(gx, g);
                        }
                    }
                }
            }
        }

        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(LasError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads, visited })
    }
}

fn slot<'g, T: Scalar>(grads: &'g mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize) -> Option<&'g mut [T]> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(
        grads[id]
            .get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()))
            .data_mut(),
    )
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn map<T: Scalar>(v: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| f(*x)).collect())
        .expect("shape preserved")
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value().matmul(&rhs.value())?;
        self.tape.push("matmul", out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose();
        self.tape.push("transpose", out, Op::Transpose(self.id), &[self.id])
    }

    fn binary(self, rhs: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let a = self.value();
        let b = rhs.value();
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(a.shape().to_vec(), data)
        } else if b.len() == 1 {
            let y = b.data()[0];
            Ok(map(&a, |x| f(x, y)))
        } else if a.len() == 1 {
            let x = a.data()[0];
            Ok(map(&b, |y| f(x, y)))
        } else {
            Err(shape_err(name, &a, &b))
        }
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.binary(rhs, "add", |x, y| x + y)?;
        self.tape.push("add", out, Op::Add(self.id, rhs.id), &[self.id, rhs.id])
    }

    /// Elementwise product; either side may be a single-element tensor.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.binary(rhs, "mul", |x, y| x * y)?;
        self.tape.push("mul", out, Op::Mul(self.id, rhs.id), &[self.id, rhs.id])
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let r = row.value();
        let n = a.cols();
        if r.len() != n {
            return Err(shape_err("add_row", &a, &r));
        }
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            add_into(chunk, r.data());
        }
        self.tape.push("add_row", out, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        let k = T::cast(c);
        let out = map(&self.value(), |x| x * k);
        self.tape.push("scale", out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        let out = map(&self.value(), T::tanh);
        self.tape.push("tanh", out, Op::Tanh(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        let out = map(&self.value(), sigmoid);
        self.tape.push("sigmoid", out, Op::Sigmoid(self.id), &[self.id])
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.is_empty() {
            return Err(LasError::EmptyInput("softmax"));
        }
        let mut out = Tensor::zeros(a.shape());
        let n = a.cols();
        for (src, dst) in a.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            softmax_row(src, dst);
        }
        self.tape.push("softmax", out, Op::Softmax(self.id), &[self.id])
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.is_empty() {
            return Err(LasError::EmptyInput("log_softmax"));
        }
        let mut out = Tensor::zeros(a.shape());
        let n = a.cols();
        for (src, dst) in a.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            log_softmax_row(src, dst);
        }
        self.tape.push("log_softmax", out, Op::LogSoftmax(self.id), &[self.id])
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (rows, cols) = a.dims2();
        if start > end || end > cols {
            return Err(LasError::Index {
                what: "column slice",
                index: end,
                size: cols,
            });
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&a.row(r)[start..end]);
        }
        let t = Tensor::matrix(rows, end - start, out)?;
        self.tape.push("slice_cols", t, Op::SliceCols(self.id, start), &[self.id])
    }

    /// Rows `start..end` as a matrix.
    pub fn rows(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (rows, cols) = a.dims2();
        if start >= end || end > rows {
            return Err(LasError::Index {
                what: "row range",
                index: end,
                size: rows,
            });
        }
        let t = Tensor::matrix(end - start, cols, a.data()[start * cols..end * cols].to_vec())?;
        self.tape.push("rows", t, Op::Rows(self.id, start), &[self.id])
    }

    /// Row `i` as a `[1, n]` matrix.
    pub fn row(self, i: usize) -> Result<Var<'t, T>> {
        self.rows(i, i + 1)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshaped(shape)?;
        self.tape.push("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// Appends zero rows until the matrix has `rows` rows.
    pub fn pad_rows(self, rows: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (r, c) = a.dims2();
        if rows < r {
            return Err(LasError::Index {
                what: "pad_rows target",
                index: rows,
                size: r,
            });
        }
        let mut data = a.data().to_vec();
        data.resize(rows * c, T::zero());
        let t = Tensor::matrix(rows, c, data)?;
        self.tape.push("pad_rows", t, Op::PadRows(self.id), &[self.id])
    }

    /// The element at flat index `idx` as a single-element tensor.
    pub fn pick(self, idx: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if idx >= a.len() {
            return Err(LasError::Index {
                what: "pick",
                index: idx,
                size: a.len(),
            });
        }
        let t = Tensor::scalar(a.data()[idx]);
        self.tape.push("pick", t, Op::Pick(self.id, idx), &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let t = Tensor::scalar(self.value().sum());
        self.tape.push("sum", t, Op::Sum(self.id), &[self.id])
    }
}
