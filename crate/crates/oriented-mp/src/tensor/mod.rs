//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Tensors are row-major buffers with a shape. Operations on tracked tensors
//! (anything with `requires_grad`, or derived from one) record nodes on a
//! thread-local tape; [`Tensor::backward`] replays the tape in reverse and
//! fills each tracked tensor's gradient slot. The engine is deliberately
//! small: f64 only, no views, broadcasting is right-aligned with size-1
//! stretching, and every backward rule lives in one match statement.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

mod kernels;
mod tape;

pub use tape::{backward, is_recording, no_grad};

pub(crate) use kernels::cross3;

/// Reduction flavors for [`Tensor::reduce`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Gradient routes to the first (lowest flat index) argmax element on ties.
    Max,
}

/// A dense matrix of row indices, used by gather/scatter and neighbor lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<usize>,
}

impl IndexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "index matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(IndexMatrix { rows, cols, data })
    }

    pub fn at(&self, r: usize, c: usize) -> usize {
        self.data[r * self.cols + c]
    }

    /// `[n,k]` matrix whose every entry in row `i` is `i`; gathers a tensor's
    /// own row `k` times (broadcasting node features over their neighbors).
    pub fn self_rows(n: usize, k: usize) -> Self {
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            for _ in 0..k {
                data.push(i);
            }
        }
        IndexMatrix { rows: n, cols: k, data }
    }
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    node: Cell<Option<(u64, usize)>>,
}

/// Dense f64 tensor carrying an optional gradient and an optional handle
/// into the active computation graph. Cloning is cheap and shares storage.
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.shape(),
            self.requires_grad()
        )
    }
}

impl Tensor {
    pub fn from_data(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let n = kernels::numel(shape);
        if values.len() != n {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        Ok(Tensor::raw(shape.to_vec(), values, requires_grad))
    }

    fn raw(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(values),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    fn untracked(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::raw(shape, values, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::untracked(shape.to_vec(), vec![0.0; kernels::numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::untracked(shape.to_vec(), vec![v; kernels::numel(shape)])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::untracked(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        kernels::numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub(crate) fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
    }

    /// Marks a freshly created tensor as a differentiable leaf.
    pub fn requiring_grad(self) -> Tensor {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() requires a single-element tensor, got {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrites the buffer in place (same length). Used by the optimizer
    /// and by finite-difference probes; never call while a graph referencing
    /// this tensor is still pending backward.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        let mut d = self.inner.data.borrow_mut();
        if d.len() != values.len() {
            return Err(Error::shape(format!(
                "set_data length {} != tensor numel {}",
                values.len(),
                d.len()
            )));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn set_grad(&self, g: Vec<f64>) {
        *self.inner.grad.borrow_mut() = Some(g);
    }

    pub(crate) fn node_handle(&self) -> Option<(u64, usize)> {
        self.inner.node.get()
    }

    pub(crate) fn set_node_handle(&self, h: Option<(u64, usize)>) {
        self.inner.node.set(h);
    }

    /// Value copy with no graph history and no gradient requirement.
    pub fn detach(&self) -> Tensor {
        Tensor::untracked(self.inner.shape.clone(), self.value())
    }

    pub fn backward(&self) -> Result<()> {
        tape::backward(self)
    }

    // ---- pointwise ----

    fn binary(&self, other: &Tensor, kind: tape::BinKind) -> Result<Tensor> {
        let out_shape = kernels::broadcast_shape(self.shape(), other.shape())?;
        let n = kernels::numel(&out_shape);
        let mut out = vec![0.0; n];
        {
            let a = self.data();
            let b = other.data();
            if self.shape() == other.shape() {
                match kind {
                    tape::BinKind::Add => {
                        for i in 0..n {
                            out[i] = a[i] + b[i];
                        }
                    }
                    tape::BinKind::Sub => {
                        for i in 0..n {
                            out[i] = a[i] - b[i];
                        }
                    }
                    tape::BinKind::Mul => {
                        for i in 0..n {
                            out[i] = a[i] * b[i];
                        }
                    }
                    tape::BinKind::Div => {
                        for i in 0..n {
                            out[i] = a[i] / b[i];
                        }
                    }
                }
            } else {
                kernels::for_each_broadcast2(&out_shape, self.shape(), other.shape(), |i, ao, bo| {
                    out[i] = match kind {
                        tape::BinKind::Add => a[ao] + b[bo],
                        tape::BinKind::Sub => a[ao] - b[bo],
                        tape::BinKind::Mul => a[ao] * b[bo],
                        tape::BinKind::Div => a[ao] / b[bo],
                    };
                });
            }
        }
        let t = Tensor::untracked(out_shape, out);
        tape::record_binary(kind, self, other, &t);
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, tape::BinKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, tape::BinKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, tape::BinKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, tape::BinKind::Div)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    fn unary(&self, kind: tape::UnKind, f: impl Fn(f64) -> f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::untracked(self.inner.shape.clone(), out);
        tape::record_unary(kind, self, &t);
        t
    }

    pub fn relu(&self) -> Tensor {
        self.unary(tape::UnKind::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(tape::UnKind::Sigmoid, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(tape::UnKind::Sqrt, f64::sqrt)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(tape::UnKind::Neg, |v| -v)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(tape::UnKind::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(tape::UnKind::Ln, f64::ln)
    }

    /// Multiplication by a compile-time constant (no gradient for `c`).
    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| v * c).collect();
        let t = Tensor::untracked(self.inner.shape.clone(), out);
        tape::record_scale(self, c, &t);
        t
    }

    // ---- linear algebra ----

    /// Batched matrix product. Two layouts are supported:
    /// `[.., k] x [k, n]` (weights shared over leading dims) and
    /// `[B.., m, k] x [B.., k, n]` with equal batch dims.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let ashape = self.shape();
        let bshape = other.shape();
        let out = if bshape.len() == 2 {
            if ashape.is_empty() || *ashape.last().unwrap() != bshape[0] {
                return Err(Error::shape(format!(
                    "matmul inner dims disagree: {:?} x {:?}",
                    ashape, bshape
                )));
            }
            let k = bshape[0];
            let n = bshape[1];
            let rows = self.numel() / k;
            let mut out = vec![0.0; rows * n];
            kernels::mm_nn(&self.data(), &other.data(), rows, k, n, &mut out);
            let mut shape = ashape[..ashape.len() - 1].to_vec();
            shape.push(n);
            Tensor::untracked(shape, out)
        } else if ashape.len() == bshape.len() && ashape.len() >= 3 {
            let r = ashape.len();
            if ashape[..r - 2] != bshape[..r - 2] || ashape[r - 1] != bshape[r - 2] {
                return Err(Error::shape(format!(
                    "batched matmul shapes disagree: {:?} x {:?}",
                    ashape, bshape
                )));
            }
            let (m, k, n) = (ashape[r - 2], ashape[r - 1], bshape[r - 1]);
            let batch: usize = ashape[..r - 2].iter().product();
            let mut out = vec![0.0; batch * m * n];
            {
                let a = self.data();
                let b = other.data();
                for bi in 0..batch {
                    kernels::mm_nn(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &b[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                    );
                }
            }
            let mut shape = ashape[..r - 2].to_vec();
            shape.push(m);
            shape.push(n);
            Tensor::untracked(shape, out)
        } else {
            return Err(Error::shape(format!(
                "unsupported matmul layout: {:?} x {:?}",
                ashape, bshape
            )));
        };
        tape::record_matmul(self, other, &out);
        Ok(out)
    }

    pub fn transpose_last2(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::shape(format!(
                "transpose_last2 requires rank >= 2, got {:?}",
                shape
            )));
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch: usize = shape[..r - 2].iter().product();
        let mut out = vec![0.0; self.numel()];
        {
            let a = self.data();
            for bi in 0..batch {
                let blk = &a[bi * m * n..(bi + 1) * m * n];
                let dst = &mut out[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = blk[i * n + j];
                    }
                }
            }
        }
        let mut oshape = shape[..r - 2].to_vec();
        oshape.push(n);
        oshape.push(m);
        let t = Tensor::untracked(oshape, out);
        tape::record_transpose(self, &t);
        Ok(t)
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if kernels::numel(new_shape) != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape(),
                self.numel(),
                new_shape
            )));
        }
        let t = Tensor::untracked(new_shape.to_vec(), self.value());
        tape::record_reshape(self, &t);
        Ok(t)
    }

    // ---- reductions ----

    pub fn reduce(&self, kind: ReduceKind, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "reduce axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let ext = shape[axis];
        if ext == 0 {
            return Err(Error::shape("cannot reduce over an empty axis"));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        {
            let a = self.data();
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    for o in 0..outer {
                        for e in 0..ext {
                            for i in 0..inner {
                                out[o * inner + i] += a[(o * ext + e) * inner + i];
                            }
                        }
                    }
                    if kind == ReduceKind::Mean {
                        for v in &mut out {
                            *v /= ext as f64;
                        }
                    }
                }
                ReduceKind::Max => {
                    argmax = vec![0usize; outer * inner];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for e in 0..ext {
                                let idx = (o * ext + e) * inner + i;
                                if a[idx] > best {
                                    best = a[idx];
                                    best_idx = idx;
                                }
                            }
                            out[o * inner + i] = best;
                            argmax[o * inner + i] = best_idx;
                        }
                    }
                }
            }
        }
        let mut oshape = shape.to_vec();
        oshape.remove(axis);
        let t = Tensor::untracked(oshape, out);
        tape::record_reduce(kind, axis, self, argmax, &t);
        Ok(t)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, axis)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, axis)
    }

    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Max, axis)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        self.reshape(&[self.numel()])?.sum_axis(0)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.reshape(&[self.numel()])?.mean_axis(0)
    }

    /// Column means of an `[n, d]` matrix where each column is summed in
    /// sorted value order, making the result bitwise invariant to row
    /// permutations. The gradient is the ordinary mean gradient.
    pub fn mean_rows_sorted(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "mean_rows_sorted requires [n, d], got {:?}",
                shape
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        if n == 0 {
            return Err(Error::argument("mean over an empty set of rows"));
        }
        let mut out = vec![0.0; d];
        {
            let a = self.data();
            let mut col = vec![0.0; n];
            for c in 0..d {
                for r in 0..n {
                    col[r] = a[r * d + c];
                }
                col.sort_by(f64::total_cmp);
                out[c] = col.iter().sum::<f64>() / n as f64;
            }
        }
        let t = Tensor::untracked(vec![d], out);
        tape::record_mean_rows_sorted(self, &t);
        Ok(t)
    }

    // ---- structural ----

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::shape(format!(
                "concat axis {} out of range for {:?}",
                axis, first
            )));
        }
        let mut total_ext = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat shapes incompatible: {:?} vs {:?} along axis {}",
                    first,
                    s,
                    axis
                )));
            }
            total_ext += s[axis];
        }
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut oshape = first.to_vec();
        oshape[axis] = total_ext;
        let mut out = vec![0.0; kernels::numel(&oshape)];
        let mut start = 0usize;
        for p in parts {
            let ext = p.shape()[axis];
            let d = p.data();
            for o in 0..outer {
                for e in 0..ext {
                    let dst = (o * total_ext + start + e) * inner;
                    let src = (o * ext + e) * inner;
                    out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
                }
            }
            start += ext;
        }
        let t = Tensor::untracked(oshape, out);
        tape::record_concat(axis, parts, &t);
        Ok(t)
    }

    /// `out[m, j, :] = self[idx[m, j], :]`; the backward pass scatter-adds,
    /// so duplicated indices accumulate gradients.
    pub fn gather_rows(&self, idx: &IndexMatrix) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "gather_rows requires [n, d] input, got {:?}",
                shape
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = idx.data.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!(
                "gather_rows index {} out of range for {} rows",
                bad, n
            )));
        }
        let mut out = vec![0.0; idx.rows * idx.cols * d];
        {
            let a = self.data();
            for (pos, &row) in idx.data.iter().enumerate() {
                out[pos * d..(pos + 1) * d].copy_from_slice(&a[row * d..(row + 1) * d]);
            }
        }
        let t = Tensor::untracked(vec![idx.rows, idx.cols, d], out);
        tape::record_gather_rows(self, idx, &t);
        Ok(t)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "slice axis {} out of range for {:?}",
                axis, shape
            )));
        }
        if start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice {}..{} exceeds extent {} on axis {}",
                start,
                start + len,
                shape[axis],
                axis
            )));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let ext = shape[axis];
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let mut out = vec![0.0; kernels::numel(&oshape)];
        {
            let a = self.data();
            for o in 0..outer {
                for e in 0..len {
                    let src = (o * ext + start + e) * inner;
                    let dst = (o * len + e) * inner;
                    out[dst..dst + inner].copy_from_slice(&a[src..src + inner]);
                }
            }
        }
        let t = Tensor::untracked(oshape, out);
        tape::record_slice(self, axis, start, &t);
        Ok(t)
    }

    // ---- geometry primitives ----

    /// Stabilized row norms over the last axis: `sqrt(sum(x^2) + eps^2)`.
    /// Smooth everywhere including the zero vector.
    pub fn l2_norm_rows(&self, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::argument(format!("l2_norm_rows eps must be > 0, got {eps}")));
        }
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::shape("l2_norm_rows requires rank >= 1"));
        }
        let e = *shape.last().unwrap();
        let rows = self.numel() / e.max(1);
        let mut out = vec![0.0; rows];
        {
            let a = self.data();
            for r in 0..rows {
                let mut s = eps * eps;
                for c in 0..e {
                    let v = a[r * e + c];
                    s += v * v;
                }
                out[r] = s.sqrt();
            }
        }
        let oshape = shape[..shape.len() - 1].to_vec();
        let t = Tensor::untracked(oshape, out);
        tape::record_l2_norm_rows(self, &t);
        Ok(t)
    }

    /// Right-handed cross product over the last axis (extent 3).
    pub fn cross(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() || self.shape().last() != Some(&3) {
            return Err(Error::shape(format!(
                "cross requires equal [.., 3] shapes, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let rows = self.numel() / 3;
        let mut out = vec![0.0; self.numel()];
        {
            let a = self.data();
            let b = other.data();
            for r in 0..rows {
                let s = r * 3;
                let c = kernels::cross3(&a[s..s + 3], &b[s..s + 3]);
                out[s..s + 3].copy_from_slice(&c);
            }
        }
        let t = Tensor::untracked(self.inner.shape.clone(), out);
        tape::record_cross(self, other, &t);
        Ok(t)
    }
}
