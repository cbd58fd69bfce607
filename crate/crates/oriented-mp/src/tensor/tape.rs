//! The computation graph: an append-only tape of operation records.
//!
//! Each thread owns one tape. Operations record a node when autodiff is
//! enabled and at least one operand is tracked; `backward` walks the tape in
//! reverse insertion order (which is a topological order by construction),
//! deposits gradients into the tensors' gradient slots, and consumes the
//! graph. Tensors used after that re-register as leaves on next use.

use std::cell::RefCell;

use super::kernels;
use super::{IndexMatrix, ReduceKind, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::new());
}

pub(super) struct Tape {
    generation: u64,
    no_grad_depth: u32,
    nodes: Vec<Node>,
}

struct Node {
    out: Tensor,
    op: Op,
}

/// An operand: its node id when tracked in the current graph, plus the
/// tensor itself so backward rules can read saved values.
pub(super) struct Src {
    id: Option<usize>,
    t: Tensor,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(super) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(super) enum UnKind {
    Relu,
    Sigmoid,
    Sqrt,
    Neg,
    Exp,
    Ln,
}

enum Op {
    Leaf,
    Binary { kind: BinKind, a: Src, b: Src },
    Unary { kind: UnKind, a: Src },
    Scale { a: Src, c: f64 },
    Matmul { a: Src, b: Src },
    TransposeLast2 { a: Src },
    Reshape { a: Src },
    Reduce { kind: ReduceKind, axis: usize, a: Src, argmax: Vec<usize> },
    MeanRowsSorted { a: Src },
    Concat { axis: usize, parts: Vec<Src> },
    GatherRows { a: Src, idx: IndexMatrix },
    Slice { axis: usize, start: usize, a: Src },
    L2NormRows { a: Src },
    Cross { a: Src, b: Src },
}

impl Tape {
    fn new() -> Self {
        Tape {
            generation: 0,
            no_grad_depth: 0,
            nodes: Vec::new(),
        }
    }

    fn recording(&self) -> bool {
        self.no_grad_depth == 0
    }

    /// Node id of `t` in the current graph, registering it as a leaf if it
    /// requires gradients but has no live node yet.
    fn operand_id(&mut self, t: &Tensor) -> Option<usize> {
        if let Some((gen, id)) = t.node_handle() {
            if gen == self.generation {
                return Some(id);
            }
        }
        if t.requires_grad() {
            let id = self.nodes.len();
            self.nodes.push(Node {
                out: t.clone(),
                op: Op::Leaf,
            });
            t.set_node_handle(Some((self.generation, id)));
            return Some(id);
        }
        None
    }

    fn push(&mut self, out: &Tensor, op: Op) {
        let id = self.nodes.len();
        out.set_node_handle(Some((self.generation, id)));
        out.set_requires_grad(true);
        self.nodes.push(Node { out: out.clone(), op });
    }
}

/// Runs `f` with gradient recording disabled (nesting is fine). Used for
/// evaluation passes and finite-difference probes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    TAPE.with(|c| c.borrow_mut().no_grad_depth += 1);
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            TAPE.with(|c| c.borrow_mut().no_grad_depth -= 1);
        }
    }
    let _g = Guard;
    f()
}

/// True when operations on tracked tensors will be recorded.
pub fn is_recording() -> bool {
    TAPE.with(|c| c.borrow().recording())
}

fn record(out: &Tensor, make: impl FnOnce(&mut Tape) -> Option<Op>) {
    TAPE.with(|c| {
        let mut tape = c.borrow_mut();
        if !tape.recording() {
            return;
        }
        if let Some(op) = make(&mut tape) {
            tape.push(out, op);
        }
    });
}

fn src(tape: &mut Tape, t: &Tensor) -> Src {
    Src {
        id: tape.operand_id(t),
        t: t.clone(),
    }
}

fn any_tracked(tape: &mut Tape, ts: &[&Tensor]) -> bool {
    ts.iter().any(|t| {
        if let Some((gen, _)) = t.node_handle() {
            if gen == tape.generation {
                return true;
            }
        }
        t.requires_grad()
    })
}

pub(super) fn record_binary(kind: BinKind, a: &Tensor, b: &Tensor, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a, b]) {
            return None;
        }
        Some(Op::Binary {
            kind,
            a: src(tape, a),
            b: src(tape, b),
        })
    });
}

pub(super) fn record_unary(kind: UnKind, a: &Tensor, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a]) {
            return None;
        }
        Some(Op::Unary { kind, a: src(tape, a) })
    });
}

pub(super) fn record_scale(a: &Tensor, c: f64, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a]) {
            return None;
        }
        Some(Op::Scale { a: src(tape, a), c })
    });
}

pub(super) fn record_matmul(a: &Tensor, b: &Tensor, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a, b]) {
            return None;
        }
        Some(Op::Matmul {
            a: src(tape, a),
            b: src(tape, b),
        })
    });
}

pub(super) fn record_transpose(a: &Tensor, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a]) {
            return None;
        }
        Some(Op::TransposeLast2 { a: src(tape, a) })
    });
}

pub(super) fn record_reshape(a: &Tensor, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a]) {
            return None;
        }
        Some(Op::Reshape { a: src(tape, a) })
    });
}

pub(super) fn record_reduce(
    kind: ReduceKind,
    axis: usize,
    a: &Tensor,
    argmax: Vec<usize>,
    out: &Tensor,
) {
    record(out, |tape| {
        if !any_tracked(tape, &[a]) {
            return None;
        }
        Some(Op::Reduce {
            kind,
            axis,
            a: src(tape, a),
            argmax,
        })
    });
}

pub(super) fn record_mean_rows_sorted(a: &Tensor, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a]) {
            return None;
        }
        Some(Op::MeanRowsSorted { a: src(tape, a) })
    });
}

pub(super) fn record_concat(axis: usize, parts: &[&Tensor], out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, parts) {
            return None;
        }
        Some(Op::Concat {
            axis,
            parts: parts.iter().map(|t| src(tape, t)).collect(),
        })
    });
}

pub(super) fn record_gather_rows(a: &Tensor, idx: &IndexMatrix, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a]) {
            return None;
        }
        Some(Op::GatherRows {
            a: src(tape, a),
            idx: idx.clone(),
        })
    });
}

pub(super) fn record_slice(a: &Tensor, axis: usize, start: usize, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a]) {
            return None;
        }
        Some(Op::Slice {
            axis,
            start,
            a: src(tape, a),
        })
    });
}

pub(super) fn record_l2_norm_rows(a: &Tensor, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a]) {
            return None;
        }
        Some(Op::L2NormRows { a: src(tape, a) })
    });
}

pub(super) fn record_cross(a: &Tensor, b: &Tensor, out: &Tensor) {
    record(out, |tape| {
        if !any_tracked(tape, &[a, b]) {
            return None;
        }
        Some(Op::Cross {
            a: src(tape, a),
            b: src(tape, b),
        })
    });
}

/// Reverse pass from a scalar loss. Populates the gradient slot of every
/// tracked tensor reachable from the loss, then consumes the graph.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::shape(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    TAPE.with(|c| {
        let mut tape = c.borrow_mut();
        let lid = match loss.node_handle() {
            Some((gen, id)) if gen == tape.generation => id,
            _ => {
                // A bare leaf: d loss / d loss = 1.
                if loss.requires_grad() {
                    loss.set_grad(vec![1.0]);
                    return Ok(());
                }
                return Err(Error::State(
                    "loss is not connected to the active computation graph".into(),
                ));
            }
        };
        let n = tape.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[lid] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            propagate(&tape.nodes[i], &g, &mut grads);
            tape.nodes[i].out.set_grad(g);
        }
        for node in tape.nodes.drain(..) {
            node.out.set_node_handle(None);
        }
        tape.generation = tape.generation.wrapping_add(1);
        Ok(())
    })
}

fn accumulate(grads: &mut [Option<Vec<f64>>], s: &Src, contribution: Vec<f64>) {
    let id = match s.id {
        Some(id) => id,
        None => return,
    };
    match &mut grads[id] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution.iter()) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn propagate(node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out_shape = node.out.shape().to_vec();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let ad = a.t.data();
            let bd = b.t.data();
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            match kind {
                BinKind::Add => {
                    ga.copy_from_slice(g);
                    gb.copy_from_slice(g);
                }
                BinKind::Sub => {
                    ga.copy_from_slice(g);
                    for (o, gv) in gb.iter_mut().zip(g) {
                        *o = -gv;
                    }
                }
                BinKind::Mul => {
                    kernels::for_each_broadcast2(
                        &out_shape,
                        a.t.shape(),
                        b.t.shape(),
                        |i, ao, bo| {
                            ga[i] = g[i] * bd[bo];
                            gb[i] = g[i] * ad[ao];
                        },
                    );
                }
                BinKind::Div => {
                    kernels::for_each_broadcast2(
                        &out_shape,
                        a.t.shape(),
                        b.t.shape(),
                        |i, ao, bo| {
                            ga[i] = g[i] / bd[bo];
                            gb[i] = -g[i] * ad[ao] / (bd[bo] * bd[bo]);
                        },
                    );
                }
            }
            drop(ad);
            drop(bd);
            if a.id.is_some() {
                let r = kernels::reduce_to_shape(&ga, &out_shape, a.t.shape());
                accumulate(grads, a, r);
            }
            if b.id.is_some() {
                let r = kernels::reduce_to_shape(&gb, &out_shape, b.t.shape());
                accumulate(grads, b, r);
            }
        }
        Op::Unary { kind, a } => {
            let mut ga = vec![0.0; g.len()];
            match kind {
                UnKind::Relu => {
                    let ad = a.t.data();
                    for i in 0..g.len() {
                        ga[i] = if ad[i] > 0.0 { g[i] } else { 0.0 };
                    }
                }
                UnKind::Sigmoid => {
                    let od = node.out.data();
                    for i in 0..g.len() {
                        ga[i] = g[i] * od[i] * (1.0 - od[i]);
                    }
                }
                UnKind::Sqrt => {
                    let od = node.out.data();
                    for i in 0..g.len() {
                        ga[i] = g[i] / (2.0 * od[i]);
                    }
                }
                UnKind::Neg => {
                    for i in 0..g.len() {
                        ga[i] = -g[i];
                    }
                }
                UnKind::Exp => {
                    let od = node.out.data();
                    for i in 0..g.len() {
                        ga[i] = g[i] * od[i];
                    }
                }
                UnKind::Ln => {
                    let ad = a.t.data();
                    for i in 0..g.len() {
                        ga[i] = g[i] / ad[i];
                    }
                }
            }
            accumulate(grads, a, ga);
        }
        Op::Scale { a, c } => {
            accumulate(grads, a, g.iter().map(|v| v * c).collect());
        }
        Op::Matmul { a, b } => {
            matmul_backward(a, b, &out_shape, g, grads);
        }
        Op::TransposeLast2 { a } => {
            // grad of transpose is transpose of grad
            let ashape = a.t.shape();
            let rank = ashape.len();
            let (m, nn) = (ashape[rank - 2], ashape[rank - 1]);
            let batch: usize = ashape[..rank - 2].iter().product();
            let mut ga = vec![0.0; g.len()];
            for bi in 0..batch {
                let gb = &g[bi * m * nn..(bi + 1) * m * nn];
                let out = &mut ga[bi * m * nn..(bi + 1) * m * nn];
                for r in 0..m {
                    for cc in 0..nn {
                        out[r * nn + cc] = gb[cc * m + r];
                    }
                }
            }
            accumulate(grads, a, ga);
        }
        Op::Reshape { a } => {
            accumulate(grads, a, g.to_vec());
        }
        Op::Reduce { kind, axis, a, argmax } => {
            let ashape = a.t.shape();
            let ext = ashape[*axis];
            let inner: usize = ashape[*axis + 1..].iter().product();
            let outer: usize = ashape[..*axis].iter().product();
            let mut ga = vec![0.0; a.t.numel()];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let scale = if *kind == ReduceKind::Mean {
                        1.0 / ext as f64
                    } else {
                        1.0
                    };
                    for o in 0..outer {
                        for e in 0..ext {
                            for i in 0..inner {
                                ga[(o * ext + e) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                }
                ReduceKind::Max => {
                    for (oi, &src_idx) in argmax.iter().enumerate() {
                        ga[src_idx] += g[oi];
                    }
                }
            }
            accumulate(grads, a, ga);
        }
        Op::MeanRowsSorted { a } => {
            // forward sorts values per column before summing; the mean's
            // gradient is uniform regardless of summation order
            let ashape = a.t.shape();
            let (n, d) = (ashape[0], ashape[1]);
            let mut ga = vec![0.0; n * d];
            for r in 0..n {
                for cc in 0..d {
                    ga[r * d + cc] = g[cc] / n as f64;
                }
            }
            accumulate(grads, a, ga);
        }
        Op::Concat { axis, parts } => {
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let outer: usize = out_shape[..*axis].iter().product();
            let total_ext = out_shape[*axis];
            let mut start = 0usize;
            for p in parts {
                let ext = p.t.shape()[*axis];
                if p.id.is_some() {
                    let mut gp = vec![0.0; p.t.numel()];
                    for o in 0..outer {
                        for e in 0..ext {
                            let src = (o * total_ext + start + e) * inner;
                            let dst = (o * ext + e) * inner;
                            gp[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                        }
                    }
                    accumulate(grads, p, gp);
                }
                start += ext;
            }
        }
        Op::GatherRows { a, idx } => {
            let d = a.t.shape()[1];
            let mut ga = vec![0.0; a.t.numel()];
            for (pos, &row) in idx.data.iter().enumerate() {
                let src = pos * d;
                let dst = row * d;
                for c in 0..d {
                    ga[dst + c] += g[src + c];
                }
            }
            accumulate(grads, a, ga);
        }
        Op::Slice { axis, start, a } => {
            let ashape = a.t.shape();
            let inner: usize = ashape[*axis + 1..].iter().product();
            let outer: usize = ashape[..*axis].iter().product();
            let a_ext = ashape[*axis];
            let len = out_shape[*axis];
            let mut ga = vec![0.0; a.t.numel()];
            for o in 0..outer {
                for e in 0..len {
                    let dst = (o * a_ext + start + e) * inner;
                    let src = (o * len + e) * inner;
                    ga[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                }
            }
            accumulate(grads, a, ga);
        }
        Op::L2NormRows { a } => {
            let ashape = a.t.shape();
            let e = *ashape.last().unwrap();
            let rows = a.t.numel() / e;
            let ad = a.t.data();
            let od = node.out.data();
            let mut ga = vec![0.0; a.t.numel()];
            for r in 0..rows {
                let norm = od[r];
                for c in 0..e {
                    ga[r * e + c] = g[r] * ad[r * e + c] / norm;
                }
            }
            drop(ad);
            drop(od);
            accumulate(grads, a, ga);
        }
        Op::Cross { a, b } => {
            // c = u x w:  du = w x g,  dw = g x u
            let ad = a.t.data();
            let bd = b.t.data();
            let rows = g.len() / 3;
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            for r in 0..rows {
                let s = r * 3;
                let gu = kernels::cross3(&bd[s..s + 3], &g[s..s + 3]);
                let gw = kernels::cross3(&g[s..s + 3], &ad[s..s + 3]);
                ga[s..s + 3].copy_from_slice(&gu);
                gb[s..s + 3].copy_from_slice(&gw);
            }
            drop(ad);
            drop(bd);
            accumulate(grads, a, ga);
            accumulate(grads, b, gb);
        }
    }
}

fn matmul_backward(
    a: &Src,
    b: &Src,
    out_shape: &[usize],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let ashape = a.t.shape().to_vec();
    let bshape = b.t.shape().to_vec();
    let ad = a.t.data();
    let bd = b.t.data();
    if bshape.len() == 2 {
        // flattened-rows case: a [.., k] x b [k, n]
        let k = bshape[0];
        let n = bshape[1];
        let rows = a.t.numel() / k;
        if a.id.is_some() {
            let mut ga = vec![0.0; a.t.numel()];
            kernels::mm_nt(g, &bd, rows, n, k, &mut ga);
            drop_and_accumulate(grads, a, ga);
        }
        if b.id.is_some() {
            let mut gb = vec![0.0; k * n];
            kernels::mm_tn(&ad, g, rows, k, n, &mut gb);
            drop_and_accumulate(grads, b, gb);
        }
    } else {
        // batched case: a [B.., m, k] x b [B.., k, n]
        let ra = ashape.len();
        let (m, k) = (ashape[ra - 2], ashape[ra - 1]);
        let n = bshape[bshape.len() - 1];
        let batch: usize = out_shape[..out_shape.len() - 2].iter().product();
        let mut ga = vec![0.0; a.t.numel()];
        let mut gb = vec![0.0; b.t.numel()];
        for bi in 0..batch {
            let gblk = &g[bi * m * n..(bi + 1) * m * n];
            kernels::mm_nt(
                gblk,
                &bd[bi * k * n..(bi + 1) * k * n],
                m,
                n,
                k,
                &mut ga[bi * m * k..(bi + 1) * m * k],
            );
            kernels::mm_tn(
                &ad[bi * m * k..(bi + 1) * m * k],
                gblk,
                m,
                k,
                n,
                &mut gb[bi * k * n..(bi + 1) * k * n],
            );
        }
        if a.id.is_some() {
            drop_and_accumulate(grads, a, ga);
        }
        if b.id.is_some() {
            drop_and_accumulate(grads, b, gb);
        }
    }
}

fn drop_and_accumulate(grads: &mut [Option<Vec<f64>>], s: &Src, contribution: Vec<f64>) {
    accumulate(grads, s, contribution);
}
