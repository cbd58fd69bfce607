//! Raw f64 kernels shared by forward evaluation and backward rules.

use crate::error::{Error, Result};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= d;
    }
    strides
}

/// Right-aligned broadcast of two shapes. An axis broadcasts if the extents
/// are equal or one of them is 1 (missing leading axes count as 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast shapes {:?} and {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed through `out_shape`, with stride 0 on axes the
/// input repeats over.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let real = row_major_strides(shape);
    let mut strides = vec![0usize; rank];
    for i in 0..rank {
        if i < pad {
            strides[i] = 0;
        } else if shape[i - pad] == 1 && out_shape[i] != 1 {
            strides[i] = 0;
        } else {
            strides[i] = real[i - pad];
        }
    }
    strides
}

/// Visits every element of the broadcast output, yielding
/// `(out_index, a_offset, b_offset)`.
pub(crate) fn for_each_broadcast2(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    if n == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut idx = vec![0usize; rank];
    let mut a_off = 0usize;
    let mut b_off = 0usize;
    for i in 0..n {
        f(i, a_off, b_off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            a_off += sa[ax];
            b_off += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            a_off -= sa[ax] * out_shape[ax];
            b_off -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `g` (of shape `g_shape`) down to `target` shape, undoing a broadcast.
pub(crate) fn reduce_to_shape(g: &[f64], g_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if g_shape == target {
        return g.to_vec();
    }
    let mut out = vec![0.0; numel(target)];
    let strides = broadcast_strides(target, g_shape);
    let rank = g_shape.len();
    let mut idx = vec![0usize; rank];
    let mut t_off = 0usize;
    for (i, &gv) in g.iter().enumerate() {
        debug_assert!(i < numel(g_shape));
        out[t_off] += gv;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            t_off += strides[ax];
            if idx[ax] < g_shape[ax] {
                break;
            }
            t_off -= strides[ax] * g_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T   (i.e. a · bᵀ)
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + p] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * c[m,n]   (i.e. aᵀ · c)
pub(crate) fn mm_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * crow[j];
            }
        }
    }
}

pub(crate) fn cross3(u: &[f64], w: &[f64]) -> [f64; 3] {
    [
        u[1] * w[2] - u[2] * w[1],
        u[2] * w[0] - u[0] * w[2],
        u[0] * w[1] - u[1] * w[0],
    ]
}
