use rand::{Rng, RngCore};

use super::kernels::{
    axis_split, broadcast_shape, for_each_broadcast, gemm_nn, gemm_nt, gemm_tn, numel, reduce_broadcast, strides,
};
use super::{Node, Op, Scalar, Tape, Var};
use crate::error::{Error, Result};

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    fn meta(&self, v: Var) -> Result<(usize, Vec<usize>, bool)> {
        let i = self.check(v)?;
        let nodes = self.nodes.borrow();
        Ok((i, nodes[i].shape.clone(), nodes[i].requires_grad))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, sa, ra) = self.meta(a)?;
        let (ib, sb, rb) = self.meta(b)?;
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::Dimension { op: name, lhs: sa.clone(), rhs: sb.clone() })?;
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            let mut value = vec![T::zero(); numel(&out)];
            for_each_broadcast(&out, &sa, &sb, |o, x, y| value[o] = f(va[x], vb[y]));
            value
        };
        Ok(self.push(out, value, op(ia, ib), ra || rb))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise quotient with broadcasting.
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let (ia, shape, req) = self.meta(a)?;
        let value = self.nodes.borrow()[ia].value.iter().map(|&x| f(x)).collect();
        Ok(self.push(shape, value, op, req))
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a.index, c))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a.index))
    }

    /// `z · sigmoid(z)`.
    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a.index))
    }

    /// Elementwise `f` whose derivative is `derivative`.
    pub fn map(&self, a: Var, f: fn(T) -> T, derivative: fn(T) -> T) -> Result<Var> {
        self.unary(a, f, Op::Map { input: a.index, derivative })
    }

    /// Batched matrix product `[..×m×k] · [..×k×n]` with broadcast batch axes.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, sa, ra) = self.meta(a)?;
        let (ib, sb, rb) = self.meta(b)?;
        let mismatch = || Error::Dimension { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch());
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch = broadcast_shape(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(mismatch)?;
        let pairs = batch_pairs(&batch, &sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let mut value = vec![T::zero(); pairs.len() * m * n];
        {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[ia].value, &nodes[ib].value);
            for (o, &(pa, pb)) in pairs.iter().enumerate() {
                gemm_nn(
                    &va[pa * m * k..(pa + 1) * m * k],
                    &vb[pb * k * n..(pb + 1) * k * n],
                    &mut value[o * m * n..(o + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(self.push(shape, value, Op::MatMul(ia, ib), ra || rb))
    }

    fn check_axis(&self, name: &'static str, shape: &[usize], axis: usize) -> Result<()> {
        if axis >= shape.len() {
            return Err(Error::Shape { op: name, detail: format!("axis {axis} out of range for {shape:?}") });
        }
        Ok(())
    }

    /// Softmax along `axis`, computed after subtracting the maximum.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let (ia, shape, req) = self.meta(a)?;
        self.check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut value = self.nodes.borrow()[ia].value.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| value[at(t)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for t in 0..len {
                    let e = (value[at(t)] - max).exp();
                    value[at(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    value[at(t)] /= total;
                }
            }
        }
        Ok(self.push(shape, value, Op::Softmax { input: ia, axis }, req))
    }

    /// Mean negative log-likelihood of `targets` under `logits` (last axis is
    /// the class axis). Positions whose target equals `ignore` are skipped.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let (il, shape, req) = self.meta(logits)?;
        let classes = *shape.last().ok_or_else(|| Error::Shape { op: "cross_entropy", detail: "scalar logits".into() })?;
        let rows = numel(&shape) / classes.max(1);
        if targets.len() != rows {
            return Err(Error::Dimension { op: "cross_entropy", lhs: shape.clone(), rhs: vec![targets.len()] });
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        {
            let nodes = self.nodes.borrow();
            let v = &nodes[il].value;
            for (r, &t) in targets.iter().enumerate() {
                if t == ignore {
                    continue;
                }
                if t >= classes {
                    return Err(Error::Input(format!("target {t} out of range for {classes} classes")));
                }
                let row = &v[r * classes..(r + 1) * classes];
                total += log_sum_exp(row) - row[t].as_f64();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let value = vec![T::cast(total / count as f64)];
        let op = Op::CrossEntropy { logits: il, targets: targets.to_vec(), ignore, count };
        Ok(self.push(vec![], value, op, req))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let (ia, _, req) = self.meta(a)?;
        let total = self.nodes.borrow()[ia].value.iter().copied().sum();
        Ok(self.push(vec![], vec![total], Op::SumAll(ia), req))
    }

    pub fn sum_axis(&self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let (ia, shape, req) = self.meta(a)?;
        self.check_axis("sum_axis", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut value = vec![T::zero(); outer * inner];
        {
            let nodes = self.nodes.borrow();
            let v = &nodes[ia].value;
            for o in 0..outer {
                for t in 0..len {
                    let src = &v[(o * len + t) * inner..(o * len + t + 1) * inner];
                    for (d, &s) in value[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        let mut out = shape.clone();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
        }
        Ok(self.push(out, value, Op::SumAxis { input: ia, axis }, req))
    }

    pub fn mean_axis(&self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis, keepdim)?;
        self.scale(s, T::one() / T::cast(len as f64))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let (ia, old, req) = self.meta(a)?;
        if numel(&old) != numel(shape) {
            return Err(Error::Dimension { op: "reshape", lhs: old, rhs: shape.to_vec() });
        }
        let value = self.nodes.borrow()[ia].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(ia), req))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let (ia, shape, req) = self.meta(a)?;
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::Shape { op: "permute", detail: format!("{perm:?} is not a permutation of {shape:?}") });
        }
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let src = &nodes[ia].value;
            let mut value = Vec::with_capacity(src.len());
            permute_for_each(&shape, perm, |_, i| value.push(src[i]));
            value
        };
        Ok(self.push(out, value, Op::Permute { input: ia, perm: perm.to_vec() }, req))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let n = self.shape(a).len();
        if n < 2 {
            return Err(Error::Shape { op: "transpose", detail: "needs at least two axes".into() });
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(a, &perm)
    }

    /// Selects rows along the first axis. Backward scatter-adds, so repeated
    /// rows accumulate gradient.
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let (ia, shape, req) = self.meta(a)?;
        let (&count, rest) = shape.split_first().ok_or_else(|| Error::Shape { op: "gather_rows", detail: "scalar input".into() })?;
        let width = numel(rest);
        if let Some(&bad) = rows.iter().find(|&&r| r >= count) {
            return Err(Error::Input(format!("row {bad} out of range for {count} rows")));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let v = &nodes[ia].value;
            let mut value = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                value.extend_from_slice(&v[r * width..(r + 1) * width]);
            }
            value
        };
        let mut out = vec![rows.len()];
        out.extend_from_slice(rest);
        Ok(self.push(out, value, Op::GatherRows { input: ia, rows: rows.to_vec() }, req))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Input("concat of zero arrays".into()))?;
        let rest = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut ids = Vec::with_capacity(parts.len());
        let mut req = false;
        let mut value = Vec::new();
        for &p in parts {
            let (ip, shape, r) = self.meta(p)?;
            if shape.is_empty() || shape[1..] != rest[..] {
                let mut lhs = vec![0];
                lhs.extend(&rest);
                return Err(Error::Dimension { op: "concat_rows", lhs, rhs: shape });
            }
            rows += shape[0];
            req |= r;
            ids.push(ip);
            value.extend_from_slice(&self.nodes.borrow()[ip].value);
        }
        let mut out = vec![rows];
        out.extend(rest);
        Ok(self.push(out, value, Op::ConcatRows(ids), req))
    }

    /// Inverted dropout: kept values are scaled by `1/(1-rate)`. In eval mode,
    /// or at rate 0, returns `a` itself.
    pub fn dropout(&self, a: Var, rate: f64, train: bool, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let ia = self.check(a)?;
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::cast(1.0 / (1.0 - rate));
        let (shape, req, mask, value) = {
            let nodes = self.nodes.borrow();
            let node = &nodes[ia];
            let mask: Vec<T> =
                (0..node.value.len()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
            let value = node.value.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (node.shape.clone(), node.requires_grad, mask, value)
        };
        Ok(self.push(shape, value, Op::Dropout { input: ia, mask }, req))
    }

    /// Replaces masked elements by `fill`. The mask covers the trailing
    /// `mask.len()` elements and repeats over the leading axes.
    pub fn masked_fill(&self, a: Var, mask: &[bool], fill: T) -> Result<Var> {
        let (ia, shape, req) = self.meta(a)?;
        let n = numel(&shape);
        if mask.is_empty() || !n.is_multiple_of(mask.len()) {
            return Err(Error::Dimension { op: "masked_fill", lhs: shape, rhs: vec![mask.len()] });
        }
        let value = self.nodes.borrow()[ia].value.iter().enumerate()
            .map(|(i, &x)| if mask[i % mask.len()] { fill } else { x })
            .collect();
        Ok(self.push(shape, value, Op::MaskedFill { input: ia, mask: mask.to_vec() }, req))
    }

    /// `x / sqrt(mean(x²) + eps)` over the last axis (no gain).
    pub fn rms_normalize(&self, a: Var, eps: f64) -> Result<Var> {
        let (ia, shape, req) = self.meta(a)?;
        let d = *shape.last().ok_or_else(|| Error::Shape { op: "rms_norm", detail: "scalar input".into() })?;
        let eps = T::cast(eps);
        let mut value = self.nodes.borrow()[ia].value.clone();
        for row in value.chunks_mut(d) {
            let r = inv_rms(row, eps);
            row.iter_mut().for_each(|x| *x *= r);
        }
        Ok(self.push(shape, value, Op::RmsNormalize { input: ia, eps }, req))
    }
}

fn inv_rms<T: Scalar>(row: &[T], eps: T) -> T {
    let ms = row.iter().map(|&x| x * x).sum::<T>() / T::cast(row.len() as f64);
    T::one() / (ms + eps).sqrt()
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln()
}

/// Offsets of each broadcast batch into the two operands, in output order.
fn batch_pairs(out: &[usize], a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    if out.is_empty() {
        return vec![(0, 0)];
    }
    let mut pairs = Vec::with_capacity(numel(out));
    for_each_broadcast(out, a, b, |_, x, y| pairs.push((x, y)));
    pairs
}

/// Visits the permuted array in output order, yielding (output, input) offsets.
fn permute_for_each(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let len = numel(&out);
    let n = out.len();
    let mut counter = vec![0usize; n];
    let mut offset = 0usize;
    for o in 0..len {
        f(o, offset);
        for d in (0..n).rev() {
            counter[d] += 1;
            offset += step[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= step[d] * out[d];
            counter[d] = 0;
        }
    }
}

/// Pushes the input-gradient contributions of node `i` given its output
/// gradient `g`.
pub(crate) fn backward_rule<T: Scalar>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    acc: &mut dyn FnMut(usize, Vec<T>),
) {
    let node = &nodes[i];
    let out_shape = &node.shape;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(*a, reduce_broadcast(g, out_shape, &nodes[*a].shape));
            acc(*b, reduce_broadcast(g, out_shape, &nodes[*b].shape));
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let is_div = matches!(node.op, Op::Div(..));
            if na.requires_grad {
                let mut da = vec![T::zero(); na.value.len()];
                for_each_broadcast(out_shape, &na.shape, &nb.shape, |o, x, y| {
                    da[x] += if is_div { g[o] / nb.value[y] } else { g[o] * nb.value[y] };
                });
                acc(*a, da);
            }
            if nb.requires_grad {
                let mut db = vec![T::zero(); nb.value.len()];
                for_each_broadcast(out_shape, &na.shape, &nb.shape, |o, x, y| {
                    db[y] += if is_div {
                        -g[o] * na.value[x] / (nb.value[y] * nb.value[y])
                    } else {
                        g[o] * na.value[x]
                    };
                });
                acc(*b, db);
            }
        }
        Op::Scale(a, c) => acc(*a, g.iter().map(|&x| x * *c).collect()),
        Op::Sigmoid(a) => {
            let d = node.value.iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
            acc(*a, d);
        }
        Op::Silu(a) => {
            let d = nodes[*a].value.iter().zip(g)
                .map(|(&z, &gv)| {
                    let s = sigmoid(z);
                    gv * (s + z * s * (T::one() - s))
                })
                .collect();
            acc(*a, d);
        }
        Op::Map { input, derivative } => {
            let d = nodes[*input].value.iter().zip(g).map(|(&x, &gv)| gv * derivative(x)).collect();
            acc(*input, d);
        }
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let (sa, sb) = (&na.shape, &nb.shape);
            let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
            let batch = &out_shape[..out_shape.len() - 2];
            let pairs = batch_pairs(batch, &sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            if na.requires_grad {
                let mut da = vec![T::zero(); na.value.len()];
                for (o, &(pa, pb)) in pairs.iter().enumerate() {
                    gemm_nt(
                        &g[o * m * n..(o + 1) * m * n],
                        &nb.value[pb * k * n..(pb + 1) * k * n],
                        &mut da[pa * m * k..(pa + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                acc(*a, da);
            }
            if nb.requires_grad {
                let mut db = vec![T::zero(); nb.value.len()];
                for (o, &(pa, pb)) in pairs.iter().enumerate() {
                    gemm_tn(
                        &na.value[pa * m * k..(pa + 1) * m * k],
                        &g[o * m * n..(o + 1) * m * n],
                        &mut db[pb * k * n..(pb + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                acc(*b, db);
            }
        }
        Op::Softmax { input, axis } => {
            let (outer, len, inner) = axis_split(out_shape, *axis);
            let y = &node.value;
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |t: usize| (o * len + t) * inner + j;
                    let dot: T = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
                    for t in 0..len {
                        d[at(t)] = y[at(t)] * (g[at(t)] - dot);
                    }
                }
            }
            acc(*input, d);
        }
        Op::CrossEntropy { logits, targets, ignore, count } => {
            let nl = &nodes[*logits];
            let classes = *nl.shape.last().unwrap_or(&1);
            let scale = g[0] / T::cast(*count as f64);
            let mut d = vec![T::zero(); nl.value.len()];
            for (r, &t) in targets.iter().enumerate() {
                if t == *ignore {
                    continue;
                }
                let row = &nl.value[r * classes..(r + 1) * classes];
                let lse = T::cast(log_sum_exp(row));
                for (c, (&x, dv)) in row.iter().zip(&mut d[r * classes..(r + 1) * classes]).enumerate() {
                    let p = (x - lse).exp();
                    *dv = scale * (if c == t { p - T::one() } else { p });
                }
            }
            acc(*logits, d);
        }
        Op::SumAll(a) => acc(*a, vec![g[0]; nodes[*a].value.len()]),
        Op::SumAxis { input, axis } => {
            let (outer, len, inner) = axis_split(&nodes[*input].shape, *axis);
            let mut d = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for t in 0..len {
                    d[(o * len + t) * inner..(o * len + t + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            acc(*input, d);
        }
        Op::Reshape(a) => acc(*a, g.to_vec()),
        Op::Permute { input, perm } => {
            let mut d = vec![T::zero(); g.len()];
            permute_for_each(&nodes[*input].shape, perm, |o, x| d[x] = g[o]);
            acc(*input, d);
        }
        Op::GatherRows { input, rows } => {
            let ni = &nodes[*input];
            let width = numel(&ni.shape[1..]);
            let mut d = vec![T::zero(); ni.value.len()];
            for (o, &r) in rows.iter().enumerate() {
                for (dv, &gv) in d[r * width..(r + 1) * width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                    *dv += gv;
                }
            }
            acc(*input, d);
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                acc(p, g[start..start + len].to_vec());
                start += len;
            }
        }
        Op::Dropout { input, mask } => acc(*input, g.iter().zip(mask).map(|(&x, &m)| x * m).collect()),
        Op::MaskedFill { input, mask } => {
            let d = g.iter().enumerate().map(|(i, &x)| if mask[i % mask.len()] { T::zero() } else { x }).collect();
            acc(*input, d);
        }
        Op::RmsNormalize { input, eps } => {
            let x = &nodes[*input].value;
            let dim = *out_shape.last().unwrap_or(&1);
            let mut d = vec![T::zero(); x.len()];
            for ((xr, gr), dr) in x.chunks(dim).zip(g.chunks(dim)).zip(d.chunks_mut(dim)) {
                let r = inv_rms(xr, *eps);
                let gx: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                let coef = r * r * r * gx / T::cast(dim as f64);
                for ((dv, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                    *dv = r * gv - coef * xv;
                }
            }
            acc(*input, d);
        }
    }
}
