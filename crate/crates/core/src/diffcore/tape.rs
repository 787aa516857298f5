use std::cell::{Ref, RefCell};
use std::sync::Arc;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, sigmoid, softplus, softplus_sigmoid, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    /// `x · w + b` with `b` a single row.
    Affine(usize, usize, usize),
    /// `a + b` with `b` a single row added to every row of `a`.
    AddRow(usize, usize),
    /// Sum over rows (`Axis::Rows` → `[1, c]`) or columns (`Axis::Cols` → `[r, 1]`).
    SumAxis(usize, Axis),
    SumAll(usize),
    Broadcast(usize),
    Concat(Vec<usize>, Axis),
    GatherRows(usize, Arc<[usize]>),
    /// `a[ia] + b[ib]` row-wise.
    GatherAdd(usize, Arc<[usize]>, usize, Arc<[usize]>),
    ScatterAddRows(usize, Arc<[usize]>),
    TileRows(usize, usize),
    Reshape(usize),
    Tanh(usize),
    Softplus(usize),
    /// Softplus whose derivative is read from an already recorded sigmoid
    /// of the same input.
    SoftplusGated(usize, usize),
    Sigmoid(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in evaluation order for a single backward
/// sweep. One tape per evaluation; tapes are not shared across threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if needs_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Concatenates along `axis` (`Rows` stacks vertically).
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: Axis) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let dims: Vec<(usize, usize)> = ids.iter().map(|&i| nodes[i].value.dims()).collect();
            match axis {
                Axis::Cols => {
                    let rows = dims[0].0;
                    if dims.iter().any(|d| d.0 != rows) {
                        return Err(Error::shape("concat", format!("row counts differ: {dims:?}")));
                    }
                    let cols: usize = dims.iter().map(|d| d.1).sum();
                    let mut out = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for (&i, d) in ids.iter().zip(&dims) {
                            out.extend_from_slice(&nodes[i].value.data()[r * d.1..(r + 1) * d.1]);
                        }
                    }
                    Tensor::matrix(rows, cols, out)?
                }
                Axis::Rows => {
                    let cols = dims[0].1;
                    if dims.iter().any(|d| d.1 != cols) {
                        return Err(Error::shape("concat", format!("column counts differ: {dims:?}")));
                    }
                    let rows: usize = dims.iter().map(|d| d.0).sum();
                    let mut out = Vec::with_capacity(rows * cols);
                    for &i in &ids {
                        out.extend_from_slice(nodes[i].value.data());
                    }
                    Tensor::matrix(rows, cols, out)?
                }
            }
        };
        let needs = self.needs(&ids);
        Ok(self.push(value, Op::Concat(ids, axis), needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.dims() != (1, 1) {
            return Err(Error::shape("backward", format!("loss must be [1, 1], got {:?}", root.shape())));
        }
        if !root.is_finite() {
            return Err(Error::NonFinite(format!("loss value {}", root.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut send = |target: usize, t: Tensor| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(val(*b), |x, y| x * y));
                    send(*b, g.zip_map(val(*a), |x, y| x * y));
                }
                Op::MatMul(a, b) => {
                    let (r, k) = val(*a).dims();
                    let c = val(*b).cols();
                    if nodes[*a].needs_grad {
                        let ga = matmul_nt(g.data(), val(*b).data(), r, c, k);
                        send(*a, Tensor::matrix(r, k, ga)?);
                    }
                    if nodes[*b].needs_grad {
                        let gb = matmul_tn(val(*a).data(), g.data(), r, k, c);
                        send(*b, Tensor::matrix(k, c, gb)?);
                    }
                }
                Op::Affine(x, w, b) => {
                    let (r, k) = val(*x).dims();
                    let c = val(*w).cols();
                    if nodes[*x].needs_grad {
                        let gx = matmul_nt(g.data(), val(*w).data(), r, c, k);
                        send(*x, Tensor::matrix(r, k, gx)?);
                    }
                    if nodes[*w].needs_grad {
                        let gw = matmul_tn(val(*x).data(), g.data(), r, k, c);
                        send(*w, Tensor::matrix(k, c, gw)?);
                    }
                    if nodes[*b].needs_grad {
                        send(*b, column_sums(&g)?);
                    }
                }
                Op::AddRow(a, b) => {
                    if nodes[*b].needs_grad {
                        send(*b, column_sums(&g)?);
                    }
                    send(*a, g.clone());
                }
                Op::SumAxis(a, axis) => {
                    let (r, c) = val(*a).dims();
                    let mut out = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            out.push(match axis {
                                Axis::Rows => g.data()[j],
                                Axis::Cols => g.data()[i],
                            });
                        }
                    }
                    send(*a, Tensor::matrix(r, c, out)?);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).dims();
                    send(*a, Tensor::full(r, c, g.item()));
                }
                Op::Broadcast(a) => {
                    let (r0, c0) = val(*a).dims();
                    let (r, c) = g.dims();
                    let mut out = vec![0.0; r0 * c0];
                    for i in 0..r {
                        for j in 0..c {
                            out[(i % r0) * c0 + (j % c0)] += g.data()[i * c + j];
                        }
                    }
                    send(*a, Tensor::matrix(r0, c0, out)?);
                }
                Op::Concat(ids, axis) => {
                    let (rows, cols) = g.dims();
                    let mut offset = 0;
                    for &i in ids {
                        let (ri, ci) = val(i).dims();
                        let part = match axis {
                            Axis::Cols => {
                                let mut out = Vec::with_capacity(ri * ci);
                                for r in 0..rows {
                                    out.extend_from_slice(&g.data()[r * cols + offset..r * cols + offset + ci]);
                                }
                                offset += ci;
                                out
                            }
                            Axis::Rows => {
                                let out = g.data()[offset * cols..(offset + ri) * cols].to_vec();
                                offset += ri;
                                out
                            }
                        };
                        send(i, Tensor::matrix(ri, ci, part)?);
                    }
                }
                Op::GatherAdd(a, ia, b, ib) => {
                    for (src, idx) in [(*a, ia), (*b, ib)] {
                        let (r0, c) = val(src).dims();
                        let mut out = vec![0.0; r0 * c];
                        for (row, &i) in idx.iter().enumerate() {
                            let gr = &g.data()[row * c..(row + 1) * c];
                            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(gr) {
                                *o += x;
                            }
                        }
                        send(src, Tensor::matrix(r0, c, out)?);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (r0, c) = val(*a).dims();
                    let mut out = vec![0.0; r0 * c];
                    for (row, &src) in idx.iter().enumerate() {
                        let gr = &g.data()[row * c..(row + 1) * c];
                        for (o, x) in out[src * c..(src + 1) * c].iter_mut().zip(gr) {
                            *o += x;
                        }
                    }
                    send(*a, Tensor::matrix(r0, c, out)?);
                }
                Op::ScatterAddRows(a, idx) => {
                    let (r0, c) = val(*a).dims();
                    let mut out = Vec::with_capacity(r0 * c);
                    for &dst in idx.iter() {
                        out.extend_from_slice(&g.data()[dst * c..(dst + 1) * c]);
                    }
                    send(*a, Tensor::matrix(r0, c, out)?);
                }
                Op::TileRows(a, times) => {
                    let (r0, c) = val(*a).dims();
                    let block = r0 * c;
                    let mut out = vec![0.0; block];
                    for t in 0..*times {
                        for (o, x) in out.iter_mut().zip(&g.data()[t * block..(t + 1) * block]) {
                            *o += x;
                        }
                    }
                    send(*a, Tensor::matrix(r0, c, out)?);
                }
                Op::Reshape(a) => {
                    let (r0, c0) = val(*a).dims();
                    send(*a, g.reshaped(r0, c0));
                }
                Op::Tanh(a) => send(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Softplus(a) => send(*a, g.zip_map(val(*a), |x, y| x * sigmoid(y))),
                Op::SoftplusGated(a, s) => send(*a, g.zip_map(val(*s), |x, y| x * y)),
                Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Square(a) => send(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
                Op::Sqrt(a) => send(*a, g.zip_map(&node.value, |x, y| 0.5 * x / y)),
                Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)),
                Op::Neg(a) => send(*a, g.map(|x| -x)),
                Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
                Op::AddConst(a) => send(*a, g),
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn node(&self) -> Ref<'t, Node> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn value(&self) -> Tensor {
        self.node().value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.node().value)
    }

    pub fn item(&self) -> f64 {
        self.node().value.item()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.node().value.dims()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.node().value.is_finite()
    }

    fn unary(self, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (value, needs) = {
            let n = self.node();
            (n.value.map(f), n.needs_grad)
        };
        self.tape.push(value, op(self.id), needs)
    }

    fn binary_same(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.dims() != b.dims() {
                return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            a.zip_map(b, f)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op(self.id, other.id), needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let ((r, k), (k2, c)) = (a.dims(), b.dims());
            if k != k2 {
                return Err(Error::shape("matmul", format!("[{r}, {k}] x [{k2}, {c}]")));
            }
            Tensor::matrix(r, c, matmul_nn(a.data(), b.data(), r, k, c))?
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    pub fn sum_axis(self, axis: Axis) -> Var<'t> {
        let (value, needs) = {
            let n = self.node();
            let (r, c) = n.value.dims();
            let d = n.value.data();
            let t = match axis {
                Axis::Rows => {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                            *o += x;
                        }
                    }
                    Tensor::row(out)
                }
                Axis::Cols => Tensor::column((0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect()),
            };
            (t, n.needs_grad)
        };
        self.tape.push(value, Op::SumAxis(self.id, axis), needs)
    }

    pub fn sum(self) -> Var<'t> {
        let (value, needs) = {
            let n = self.node();
            (Tensor::scalar(n.value.data().iter().sum()), n.needs_grad)
        };
        self.tape.push(value, Op::SumAll(self.id), needs)
    }

    /// Broadcasts extents of size 1 up to `(rows, cols)`.
    pub fn broadcast(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let (value, needs) = {
            let n = self.node();
            let (r0, c0) = n.value.dims();
            if !(r0 == rows || r0 == 1) || !(c0 == cols || c0 == 1) {
                return Err(Error::shape("broadcast", format!("[{r0}, {c0}] -> [{rows}, {cols}]")));
            }
            let d = n.value.data();
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    out.push(d[(i % r0) * c0 + (j % c0)]);
                }
            }
            (Tensor::matrix(rows, cols, out)?, n.needs_grad)
        };
        Ok(self.tape.push(value, Op::Broadcast(self.id), needs))
    }

    /// `self + bias` with `bias` broadcast to `self`'s shape.
    pub fn add_broadcast(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (r, c) = self.dims();
        if bias.dims() == (r, c) {
            return self.add(bias);
        }
        if bias.dims() == (1, c) {
            let value = {
                let nodes = self.tape.nodes.borrow();
                let row = nodes[bias.id].value.data();
                let mut out = nodes[self.id].value.clone();
                add_row_in_place(&mut out, row);
                out
            };
            let needs = self.tape.needs(&[self.id, bias.id]);
            return Ok(self.tape.push(value, Op::AddRow(self.id, bias.id), needs));
        }
        self.add(bias.broadcast(r, c)?)
    }

    /// `self · w + b` for a `[1, c]` bias row.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, wv, bv) = (&nodes[self.id].value, &nodes[w.id].value, &nodes[b.id].value);
            let ((r, k), (k2, c)) = (x.dims(), wv.dims());
            if k != k2 || bv.dims() != (1, c) {
                return Err(Error::shape(
                    "affine",
                    format!("[{r}, {k}] x [{k2}, {c}] + {:?}", bv.shape()),
                ));
            }
            let mut out = Tensor::matrix(r, c, matmul_nn(x.data(), wv.data(), r, k, c))?;
            add_row_in_place(&mut out, bv.data());
            out
        };
        let needs = self.tape.needs(&[self.id, w.id, b.id]);
        Ok(self.tape.push(value, Op::Affine(self.id, w.id, b.id), needs))
    }

    pub fn gather_rows(self, idx: &Arc<[usize]>) -> Result<Var<'t>> {
        let (value, needs) = {
            let n = self.node();
            let (r0, c) = n.value.dims();
            if let Some(&bad) = idx.iter().find(|&&i| i >= r0) {
                return Err(Error::shape("gather_rows", format!("index {bad} >= {r0} rows")));
            }
            let d = n.value.data();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                out.extend_from_slice(&d[i * c..(i + 1) * c]);
            }
            (Tensor::matrix(idx.len(), c, out)?, n.needs_grad)
        };
        Ok(self.tape.push(value, Op::GatherRows(self.id, idx.clone()), needs))
    }

    /// `self[idx[i]] + other[other_idx[i]]` for every `i`.
    pub fn gather_add(self, idx: &Arc<[usize]>, other: Var<'t>, other_idx: &Arc<[usize]>) -> Result<Var<'t>> {
        if idx.len() != other_idx.len() {
            return Err(Error::shape("gather_add", format!("{} vs {} indices", idx.len(), other_idx.len())));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let ((ra, c), (rb, cb)) = (a.dims(), b.dims());
            if c != cb {
                return Err(Error::shape("gather_add", format!("{c} vs {cb} columns")));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= ra) {
                return Err(Error::shape("gather_add", format!("index {bad} >= {ra} rows")));
            }
            if let Some(&bad) = other_idx.iter().find(|&&i| i >= rb) {
                return Err(Error::shape("gather_add", format!("index {bad} >= {rb} rows")));
            }
            let (da, db) = (a.data(), b.data());
            let mut out = Vec::with_capacity(idx.len() * c);
            for (&i, &j) in idx.iter().zip(other_idx.iter()) {
                out.extend(da[i * c..(i + 1) * c].iter().zip(&db[j * c..(j + 1) * c]).map(|(x, y)| x + y));
            }
            Tensor::matrix(idx.len(), c, out)?
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::GatherAdd(self.id, idx.clone(), other.id, other_idx.clone()), needs))
    }

    /// `out[idx[i]] += self[i]`, producing `out_rows` rows.
    pub fn scatter_add_rows(self, idx: &Arc<[usize]>, out_rows: usize) -> Result<Var<'t>> {
        let (value, needs) = {
            let n = self.node();
            let (r0, c) = n.value.dims();
            if idx.len() != r0 {
                return Err(Error::shape("scatter_add_rows", format!("{} indices for {r0} rows", idx.len())));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
                return Err(Error::shape("scatter_add_rows", format!("index {bad} >= {out_rows} rows")));
            }
            let d = n.value.data();
            let mut out = vec![0.0; out_rows * c];
            for (row, &dst) in idx.iter().enumerate() {
                for (o, x) in out[dst * c..(dst + 1) * c].iter_mut().zip(&d[row * c..(row + 1) * c]) {
                    *o += x;
                }
            }
            (Tensor::matrix(out_rows, c, out)?, n.needs_grad)
        };
        Ok(self.tape.push(value, Op::ScatterAddRows(self.id, idx.clone()), needs))
    }

    /// Stacks `times` copies vertically.
    pub fn tile_rows(self, times: usize) -> Var<'t> {
        if times == 1 {
            return self;
        }
        let (value, needs) = {
            let n = self.node();
            let (r, c) = n.value.dims();
            let mut out = Vec::with_capacity(times * r * c);
            for _ in 0..times {
                out.extend_from_slice(n.value.data());
            }
            (Tensor::zeros(times * r, c).with_data(out), n.needs_grad)
        };
        self.tape.push(value, Op::TileRows(self.id, times), needs)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let (value, needs) = {
            let n = self.node();
            if n.value.len() != rows * cols {
                return Err(Error::shape("reshape", format!("{:?} -> [{rows}, {cols}]", n.value.shape())));
            }
            (n.value.clone().reshaped(rows, cols), n.needs_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), needs))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus, softplus)
    }

    /// `(softplus(x), sigmoid(x))`, sharing the exponentials.
    pub fn softplus_and_sigmoid(self) -> (Var<'t>, Var<'t>) {
        let (sp, sg, needs) = {
            let n = self.node();
            let (sp, sg) = n.value.map_pair(softplus_sigmoid);
            (sp, sg, n.needs_grad)
        };
        let s = self.tape.push(sg, Op::Sigmoid(self.id), needs);
        let v = self.tape.push(sp, Op::SoftplusGated(self.id, s.id), needs);
        (v, s)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log, f64::ln)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let (value, needs) = {
            let n = self.node();
            (n.value.map(|x| x * s), n.needs_grad)
        };
        self.tape.push(value, Op::Scale(self.id, s), needs)
    }

    /// Adds a constant to every entry.
    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst, move |x| x + c)
    }
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// The gradient for `v`, or zeros of its shape when `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = v.dims();
                Tensor::zeros(r, c)
            }
        }
    }
}

fn add_row_in_place(t: &mut Tensor, row: &[f64]) {
    let c = row.len();
    if c == 0 {
        return;
    }
    for r in t.data_mut().chunks_exact_mut(c) {
        for (o, b) in r.iter_mut().zip(row) {
            *o += b;
        }
    }
}

fn column_sums(g: &Tensor) -> Result<Tensor> {
    let (_, c) = g.dims();
    let mut out = vec![0.0; c];
    if c > 0 {
        for r in g.data().chunks_exact(c) {
            for (o, x) in out.iter_mut().zip(r) {
                *o += x;
            }
        }
    }
    Tensor::matrix(1, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradient_check, BoundParams, ParameterStore};

    fn store(entries: &[(&str, usize, usize)], seed: u64) -> ParameterStore {
        let mut r = crate::rng::stream(seed);
        let mut p = ParameterStore::new();
        for &(name, rows, cols) in entries {
            let v = crate::rng::normals(&mut r, rows * cols);
            p.insert(name, Tensor::matrix(rows, cols, v).unwrap()).unwrap();
        }
        p
    }

    fn check<F>(p: &ParameterStore, f: F)
    where
        F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
    {
        let rep = gradient_check(p, 1e-6, f).unwrap();
        assert!(rep.max_rel_err < 1e-6, "max rel err {} at {}", rep.max_rel_err, rep.worst_index);
    }

    fn idx(v: &[usize]) -> Arc<[usize]> {
        v.to_vec().into()
    }

    #[test]
    fn elementwise_binary_ops() {
        let p = store(&[("a", 3, 2), ("b", 3, 2)], 1);
        check(&p, |_, b| {
            let (x, y) = (b.var("a")?, b.var("b")?);
            Ok(x.add(y)?.mul(x.sub(y)?)?.mul(y)?.sum())
        });
    }

    #[test]
    fn unary_ops() {
        let p = store(&[("a", 4, 3)], 2);
        check(&p, |_, b| {
            let x = b.var("a")?;
            let pos = x.square().add_scalar(0.5);
            let s = x.tanh().add(x.softplus())?.add(x.sigmoid())?.add(x.exp().scale(0.1))?;
            Ok(s.add(pos.sqrt())?.add(pos.ln())?.add(x.neg())?.sum())
        });
    }

    #[test]
    fn fused_softplus_and_gate() {
        let p = store(&[("a", 5, 2)], 3);
        check(&p, |_, b| {
            let (sp, gate) = b.var("a")?.softplus_and_sigmoid();
            Ok(sp.mul(gate)?.sum())
        });
        let tape = Tape::new();
        let x = tape.var(Tensor::row(vec![-3.0, 0.0, 2.5]));
        let (sp, gate) = x.softplus_and_sigmoid();
        for ((a, b), (c, d)) in sp
            .value()
            .data()
            .iter()
            .zip(gate.value().data())
            .zip(x.softplus().value().data().iter().zip(x.sigmoid().value().data()))
        {
            assert_eq!((a, b), (c, d));
        }
    }

    #[test]
    fn matmul_affine_and_bias() {
        let p = store(&[("x", 4, 3), ("w", 3, 5), ("b", 1, 5)], 4);
        check(&p, |_, b| {
            let (x, w, bias) = (b.var("x")?, b.var("w")?, b.var("b")?);
            let y = x.affine(w, bias)?;
            let z = x.matmul(w)?.add_broadcast(bias)?;
            Ok(y.square().add(z.tanh())?.sum())
        });
        let tape = Tape::new();
        let (x, w, bias) = (
            tape.var(p.get("x").unwrap().clone()),
            tape.var(p.get("w").unwrap().clone()),
            tape.var(p.get("b").unwrap().clone()),
        );
        let y = x.affine(w, bias).unwrap().value();
        let z = x.matmul(w).unwrap().add_broadcast(bias).unwrap().value();
        for (a, b) in y.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn reductions_broadcast_reshape_concat() {
        let p = store(&[("a", 3, 4), ("s", 1, 1), ("c", 3, 1)], 5);
        check(&p, |t, b| {
            let a = b.var("a")?;
            let rows = a.sum_axis(Axis::Rows).square();
            let cols = a.sum_axis(Axis::Cols).square();
            let s = b.var("s")?.broadcast(3, 4)?.mul(a)?;
            let cat = t.concat(&[a, b.var("c")?], Axis::Cols)?.reshape(5, 3)?;
            let stacked = t.concat(&[a, a.scale(2.0)], Axis::Rows)?;
            Ok(rows.sum().add(cols.sum())?.add(s.tanh().sum())?.add(cat.square().sum())?.add(stacked.exp().sum())?)
        });
    }

    #[test]
    fn gather_scatter_and_tile() {
        let p = store(&[("a", 4, 2), ("e", 3, 2)], 6);
        check(&p, |_, b| {
            let a = b.var("a")?;
            let g = a.gather_rows(&idx(&[0, 3, 3, 1]))?;
            let s = g.square().scatter_add_rows(&idx(&[2, 0, 2, 1]), 5)?;
            let t = a.tile_rows(3).tanh();
            Ok(s.sum().add(t.sum())?)
        });
        check(&p, |_, b| {
            let (a, e) = (b.var("a")?, b.var("e")?);
            let y = a.gather_add(&idx(&[1, 0, 3, 3]), e, &idx(&[2, 2, 0, 1]))?;
            Ok(y.softplus().square().sum())
        });
    }

    #[test]
    fn gather_add_with_itself() {
        let p = store(&[("a", 3, 2)], 7);
        check(&p, |_, b| {
            let a = b.var("a")?;
            Ok(a.gather_add(&idx(&[0, 1, 2]), a, &idx(&[1, 1, 0]))?.square().sum())
        });
        let tape = Tape::new();
        let a = tape.var(Tensor::matrix(2, 1, vec![1.0, 10.0]).unwrap());
        let y = a.gather_add(&idx(&[0, 1]), a, &idx(&[1, 1])).unwrap();
        assert_eq!(y.value().data(), &[11.0, 20.0]);
        let g = tape.backward(y.sum()).unwrap().wrt(a);
        assert_eq!(g.data(), &[1.0, 3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = x.mul(c).unwrap().add(x.square()).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 9.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn shape_errors_are_reported() {
        let tape = Tape::new();
        let a = tape.var(Tensor::zeros(2, 3));
        let b = tape.var(Tensor::zeros(3, 2));
        assert!(a.add(b).is_err());
        assert!(b.matmul(b).is_err());
        assert!(a.gather_rows(&idx(&[2])).is_err());
        assert!(a.reshape(4, 2).is_err());
        assert!(tape.backward(a).is_err());
    }
}
