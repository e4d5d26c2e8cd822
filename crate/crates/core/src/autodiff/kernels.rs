//! Dense kernels shared by the tape operations: broadcasting iteration,
//! matrix products and axis decomposition.

use super::Scalar;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` expressed over the axes of `out`, zero on broadcast axes.
fn broadcast_strides(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n = out.len();
    let in_strides = strides(input);
    (0..n)
        .map(|i| {
            if i + input.len() < n {
                0
            } else {
                let j = i + input.len() - n;
                if input[j] == 1 && out[i] != 1 {
                    0
                } else {
                    in_strides[j]
                }
            }
        })
        .collect()
}

fn is_suffix(out: &[usize], input: &[usize]) -> bool {
    input.len() <= out.len() && out[out.len() - input.len()..] == *input
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output, in row-major order.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let len = numel(out);
    if len == 0 {
        return;
    }
    let a_full = a == out;
    let b_full = b == out;
    if a_full && b_full {
        (0..len).for_each(|i| f(i, i, i));
        return;
    }
    if a_full && is_suffix(out, b) {
        let bl = numel(b);
        (0..len).for_each(|i| f(i, i, i % bl));
        return;
    }
    if b_full && is_suffix(out, a) {
        let al = numel(a);
        (0..len).for_each(|i| f(i, i % al, i));
        return;
    }
    let sa = broadcast_strides(out, a);
    let sb = broadcast_strides(out, b);
    let n = out.len();
    let mut counter = vec![0usize; n];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..len {
        f(o, ia, ib);
        for d in (0..n).rev() {
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

/// Sums a gradient over the output shape back down to a broadcast input shape.
pub(crate) fn reduce_broadcast<T: Scalar>(grad: &[T], out: &[usize], input: &[usize]) -> Vec<T> {
    if out == input {
        return grad.to_vec();
    }
    let mut res = vec![T::zero(); numel(input)];
    for_each_broadcast(out, input, out, |o, i, _| res[i] += grad[o]);
    res
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            lanes[l] += a[l] * b[l];
        }
    }
    let mut acc = lanes.iter().fold(T::zero(), |s, &v| s + v);
    for (&a, &b) in xr.iter().zip(yr) {
        acc += a * b;
    }
    acc
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(g_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
    }
}
