//! Forward and backward kernels for every primitive.
//!
//! All loops run in a fixed order so results are bit-reproducible.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, GradFn, Node, Primitive, Tensor};
use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Strides of `op_shape` right-aligned against `out_shape`, with 0 on
/// broadcast dimensions.
fn effective_strides(op_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - op_shape.len();
    let op_str = strides(op_shape);
    let mut eff = vec![0usize; rank];
    for d in pad..rank {
        let od = op_shape[d - pad];
        eff[d] = if od == 1 { 0 } else { op_str[d - pad] };
    }
    eff
}

fn broadcast_shape(a: &[usize], b: &[usize], prim: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let ad = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let bd = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        if ad == bd || ad == 1 || bd == 1 {
            out[d] = ad.max(bd);
        } else {
            return Err(Error::ShapeMismatch {
                primitive: prim,
                details: format!("cannot broadcast {a:?} with {b:?}"),
            });
        }
    }
    Ok(out)
}

/// Visits every position of `out_shape` in row-major order, handing the
/// callback the output index and both broadcast operand values.
fn broadcast_zip<T: Element>(
    out_shape: &[usize],
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    mut f: impl FnMut(usize, T, T),
) {
    let rank = out_shape.len();
    let ea = effective_strides(a_shape, out_shape);
    let eb = effective_strides(b_shape, out_shape);
    let total: usize = out_shape.iter().product();
    let mut coord = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for i in 0..total {
        f(i, a[ai], b[bi]);
        for d in (0..rank).rev() {
            coord[d] += 1;
            ai += ea[d];
            bi += eb[d];
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
            ai -= ea[d] * out_shape[d];
            bi -= eb[d] * out_shape[d];
        }
    }
}

/// Sums `vals` (laid out as `from`) down to shape `to` (broadcast-compatible).
fn reduce_to_shape<T: Element>(vals: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return vals.to_vec();
    }
    let rank = from.len();
    let et = effective_strides(to, from);
    let mut out = vec![T::ZERO; to.iter().product()];
    let mut coord = vec![0usize; rank];
    let mut ti = 0usize;
    for (i, v) in vals.iter().enumerate() {
        let _ = i;
        out[ti] += *v;
        for d in (0..rank).rev() {
            coord[d] += 1;
            ti += et[d];
            if coord[d] < from[d] {
                break;
            }
            coord[d] = 0;
            ti -= et[d] * from[d];
        }
    }
    out
}

fn need<T: Element>(ops: &[&Tensor<T>], n: usize, prim: &'static str) -> Result<()> {
    if ops.len() != n {
        return Err(Error::UnsupportedPrimitive(format!(
            "{prim} expects {n} operand(s), got {}",
            ops.len()
        )));
    }
    Ok(())
}

fn parents_of<T: Element>(ops: &[&Tensor<T>]) -> Vec<Tensor<T>> {
    ops.iter().map(|t| (*t).clone()).collect()
}

pub(crate) fn dispatch<T: Element>(kind: Primitive, ops: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match kind {
        Primitive::Matmul => {
            need(ops, 2, "matmul")?;
            matmul_forward(ops[0], ops[1])
        }
        Primitive::Add => binary(ops, "add", GradFn::Add, |a, b| a + b),
        Primitive::Sub => binary(ops, "sub", GradFn::Sub, |a, b| a - b),
        Primitive::Mul => binary(ops, "mul", GradFn::Mul, |a, b| a * b),
        Primitive::Div => binary(ops, "div", GradFn::Div, |a, b| a / b),
        Primitive::Relu => {
            need(ops, 1, "relu")?;
            let x = ops[0];
            let data = x.data().iter().map(|&v| v.maxv(T::ZERO)).collect();
            Ok(Tensor::result(data, x.shape().to_vec(), parents_of(ops), GradFn::Relu))
        }
        Primitive::Sigmoid => {
            need(ops, 1, "sigmoid")?;
            let x = ops[0];
            let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
            Ok(Tensor::result(data, x.shape().to_vec(), parents_of(ops), GradFn::Sigmoid))
        }
        Primitive::Log => {
            need(ops, 1, "log")?;
            let x = ops[0];
            let data = x.data().iter().map(|&v| v.ln()).collect();
            Ok(Tensor::result(data, x.shape().to_vec(), parents_of(ops), GradFn::Log))
        }
        Primitive::Clamp { lo, hi } => {
            need(ops, 1, "clamp")?;
            if !(lo <= hi) {
                return Err(Error::Contract(format!("clamp bounds inverted: [{lo}, {hi}]")));
            }
            let (tl, th) = (T::from_f64(lo), T::from_f64(hi));
            let x = ops[0];
            let data = x.data().iter().map(|&v| v.maxv(tl).minv(th)).collect();
            Ok(Tensor::result(
                data,
                x.shape().to_vec(),
                parents_of(ops),
                GradFn::Clamp { lo: tl, hi: th },
            ))
        }
        Primitive::Affine { scale, shift } => {
            need(ops, 1, "affine")?;
            let (s, c) = (T::from_f64(scale), T::from_f64(shift));
            let x = ops[0];
            let data = x.data().iter().map(|&v| s * v + c).collect();
            Ok(Tensor::result(
                data,
                x.shape().to_vec(),
                parents_of(ops),
                GradFn::AffineScale { scale: s },
            ))
        }
        Primitive::Softmax { axis } => {
            need(ops, 1, "softmax")?;
            softmax_forward(ops[0], axis)
        }
        Primitive::LayerNorm { eps } => {
            need(ops, 1, "layer_norm")?;
            layer_norm_forward(ops[0], eps)
        }
        Primitive::Dropout { rate, training, seed } => {
            need(ops, 1, "dropout")?;
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
            }
            if !training || rate == 0.0 {
                // Exact identity: reuse the node itself.
                return Ok(ops[0].clone());
            }
            dropout_forward(ops[0], rate, seed)
        }
        Primitive::EmbeddingLookup { ids, ids_shape } => {
            need(ops, 1, "embedding_lookup")?;
            embedding_forward(ops[0], &ids, &ids_shape)
        }
        Primitive::Concat { axis } => concat_forward(ops, axis),
        Primitive::Reshape { shape } => {
            need(ops, 1, "reshape")?;
            let x = ops[0];
            let numel: usize = shape.iter().product();
            if shape.iter().any(|&d| d == 0) || numel != x.len() {
                return Err(Error::ShapeMismatch {
                    primitive: "reshape",
                    details: format!("cannot reshape {:?} to {shape:?}", x.shape()),
                });
            }
            Ok(Tensor::result(x.data().to_vec(), shape, parents_of(ops), GradFn::Reshape))
        }
        Primitive::ReduceSum { axis } => {
            need(ops, 1, "reduce_sum")?;
            reduce_forward(ops[0], axis, false)
        }
        Primitive::ReduceMean { axis } => {
            need(ops, 1, "reduce_mean")?;
            reduce_forward(ops[0], axis, true)
        }
        Primitive::Conv2d { stride, padding, reflect_pad } => {
            need(ops, 2, "conv2d")?;
            conv2d_forward(ops[0], ops[1], stride, padding, reflect_pad)
        }
        Primitive::BatchNorm { eps, training } => batch_norm_forward(ops, eps, training),
        Primitive::MaskedFill { mask, mask_shape, value } => {
            need(ops, 1, "masked_fill")?;
            masked_fill_forward(ops[0], mask, mask_shape, value)
        }
        Primitive::Transpose { axes } => {
            need(ops, 1, "transpose")?;
            transpose_forward(ops[0], &axes)
        }
    }
}

fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

fn binary<T: Element>(
    ops: &[&Tensor<T>],
    prim: &'static str,
    grad_fn: GradFn<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    need(ops, 2, prim)?;
    let (a, b) = (ops[0], ops[1]);
    let out_shape = broadcast_shape(a.shape(), b.shape(), prim)?;
    let mut data = vec![T::ZERO; out_shape.iter().product()];
    broadcast_zip(&out_shape, a.data(), a.shape(), b.data(), b.shape(), |i, av, bv| {
        data[i] = f(av, bv);
    });
    Ok(Tensor::result(data, out_shape, parents_of(ops), grad_fn))
}

// ---------------------------------------------------------------------------
// matmul

fn matmul_dims<'s>(
    a: &'s [usize],
    b: &'s [usize],
) -> Result<(usize, usize, usize, usize, bool, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::ShapeMismatch {
            primitive: "matmul",
            details: format!("operands must have rank >= 2, got {a:?} x {b:?}"),
        });
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    let rhs_broadcast = b.len() == 2 && a.len() > 2;
    if k != k2 || (!rhs_broadcast && a[..a.len() - 2] != b[..b.len() - 2]) {
        return Err(Error::ShapeMismatch {
            primitive: "matmul",
            details: format!("incompatible shapes {a:?} x {b:?}"),
        });
    }
    let batch_dims = a[..a.len() - 2].to_vec();
    let batch: usize = batch_dims.iter().product();
    Ok((m, k, n, batch, rhs_broadcast, batch_dims))
}

fn matmul_forward<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n, batch, rhs_broadcast, batch_dims) = matmul_dims(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::ZERO; batch * m * n];
    for ib in 0..batch {
        let ao = ib * m * k;
        let bo = if rhs_broadcast { 0 } else { ib * k * n };
        let co = ib * m * n;
        for i in 0..m {
            for p in 0..k {
                let av = ad[ao + i * k + p];
                let brow = bo + p * n;
                let crow = co + i * n;
                for j in 0..n {
                    out[crow + j] += av * bd[brow + j];
                }
            }
        }
    }
    let mut shape = batch_dims;
    shape.push(m);
    shape.push(n);
    Ok(Tensor::result(out, shape, vec![a.clone(), b.clone()], GradFn::Matmul))
}

fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &[T],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, n, batch, rhs_broadcast, _) =
        matmul_dims(a.shape(), b.shape()).expect("checked in forward");
    let (ad, bd) = (a.data(), b.data());
    let da = if a.requires_grad() {
        let mut da = vec![T::ZERO; ad.len()];
        for ib in 0..batch {
            let ao = ib * m * k;
            let bo = if rhs_broadcast { 0 } else { ib * k * n };
            let go = ib * m * n;
            for i in 0..m {
                for p in 0..k {
                    let mut s = T::ZERO;
                    let grow = go + i * n;
                    let brow = bo + p * n;
                    for j in 0..n {
                        s += grad[grow + j] * bd[brow + j];
                    }
                    da[ao + i * k + p] += s;
                }
            }
        }
        Some(da)
    } else {
        None
    };
    let db = if b.requires_grad() {
        let mut db = vec![T::ZERO; bd.len()];
        for ib in 0..batch {
            let ao = ib * m * k;
            let bo = if rhs_broadcast { 0 } else { ib * k * n };
            let go = ib * m * n;
            for i in 0..m {
                let grow = go + i * n;
                for p in 0..k {
                    let av = ad[ao + i * k + p];
                    let brow = bo + p * n;
                    for j in 0..n {
                        db[brow + j] += av * grad[grow + j];
                    }
                }
            }
        }
        Some(db)
    } else {
        None
    };
    (da, db)
}

// ---------------------------------------------------------------------------
// softmax / layer norm

fn axis_segments(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_forward<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::ShapeMismatch {
            primitive: "softmax",
            details: format!("axis {axis} out of range for shape {:?}", x.shape()),
        });
    }
    let (outer, len, inner) = axis_segments(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::ZERO; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.maxv(xd[base + j * inner]);
            }
            if !(mx > T::neg_infinity()) {
                return Err(Error::Contract(
                    "softmax over a fully masked slice (all scores are -inf)".into(),
                ));
            }
            let mut sum = T::ZERO;
            for j in 0..len {
                let e = (xd[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / sum;
            }
        }
    }
    Ok(Tensor::result(out, x.shape().to_vec(), vec![x.clone()], GradFn::Softmax { axis }))
}

fn softmax_backward<T: Element>(node: &Node<T>, axis: usize, grad: &[T]) -> Vec<T> {
    let y = &node.data;
    let (outer, len, inner) = axis_segments(&node.shape, axis);
    let mut dx = vec![T::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::ZERO;
            for j in 0..len {
                let idx = base + j * inner;
                dot += grad[idx] * y[idx];
            }
            for j in 0..len {
                let idx = base + j * inner;
                dx[idx] = y[idx] * (grad[idx] - dot);
            }
        }
    }
    dx
}

fn layer_norm_forward<T: Element>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if x.rank() < 1 {
        return Err(Error::ShapeMismatch {
            primitive: "layer_norm",
            details: "rank >= 1 required".into(),
        });
    }
    let n = *x.shape().last().expect("rank checked");
    let slices = x.len() / n;
    let xd = x.data();
    let tn = T::from_f64(n as f64);
    let te = T::from_f64(eps);
    let mut out = vec![T::ZERO; xd.len()];
    let mut stats = Vec::with_capacity(slices);
    for s in 0..slices {
        let base = s * n;
        let mut mean = T::ZERO;
        for j in 0..n {
            mean += xd[base + j];
        }
        mean = mean / tn;
        let mut var = T::ZERO;
        for j in 0..n {
            let d = xd[base + j] - mean;
            var += d * d;
        }
        var = var / tn;
        let inv = T::ONE / (var + te).sqrt();
        for j in 0..n {
            out[base + j] = (xd[base + j] - mean) * inv;
        }
        stats.push((mean, inv));
    }
    Ok(Tensor::result(out, x.shape().to_vec(), vec![x.clone()], GradFn::LayerNorm { stats }))
}

fn layer_norm_backward<T: Element>(node: &Node<T>, stats: &[(T, T)], grad: &[T]) -> Vec<T> {
    let y = &node.data; // normalized values
    let n = *node.shape.last().expect("rank checked");
    let tn = T::from_f64(n as f64);
    let mut dx = vec![T::ZERO; y.len()];
    for (s, &(_, inv)) in stats.iter().enumerate() {
        let base = s * n;
        let mut m1 = T::ZERO;
        let mut m2 = T::ZERO;
        for j in 0..n {
            m1 += grad[base + j];
            m2 += grad[base + j] * y[base + j];
        }
        m1 = m1 / tn;
        m2 = m2 / tn;
        for j in 0..n {
            dx[base + j] = inv * (grad[base + j] - m1 - y[base + j] * m2);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// dropout / embedding / concat / reduce

fn dropout_forward<T: Element>(x: &Tensor<T>, rate: f64, seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    let inv_keep = T::from_f64(1.0 / keep);
    let mask: Vec<bool> = (0..x.len()).map(|_| rng.random::<f64>() >= rate).collect();
    let data = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v * inv_keep } else { T::ZERO })
        .collect();
    Ok(Tensor::result(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        GradFn::Dropout { mask, inv_keep },
    ))
}

fn embedding_forward<T: Element>(
    table: &Tensor<T>,
    ids: &[u32],
    ids_shape: &[usize],
) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::ShapeMismatch {
            primitive: "embedding_lookup",
            details: format!("table must be rank 2, got {:?}", table.shape()),
        });
    }
    let numel: usize = ids_shape.iter().product();
    if numel != ids.len() || ids.is_empty() {
        return Err(Error::ShapeMismatch {
            primitive: "embedding_lookup",
            details: format!("ids shape {ids_shape:?} does not match {} ids", ids.len()),
        });
    }
    let vocab = table.shape()[0];
    let dim = table.shape()[1];
    let td = table.data();
    let mut out = vec![T::ZERO; ids.len() * dim];
    for (slot, &id) in ids.iter().enumerate() {
        let row = id as usize;
        if row >= vocab {
            return Err(Error::Vocabulary { id, vocab_size: vocab });
        }
        out[slot * dim..(slot + 1) * dim].copy_from_slice(&td[row * dim..(row + 1) * dim]);
    }
    let mut shape = ids_shape.to_vec();
    shape.push(dim);
    Ok(Tensor::result(out, shape, vec![table.clone()], GradFn::Embedding { ids: ids.to_vec() }))
}

fn concat_forward<T: Element>(ops: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if ops.is_empty() {
        return Err(Error::UnsupportedPrimitive("concat expects at least 1 operand".into()));
    }
    let rank = ops[0].rank();
    if axis >= rank {
        return Err(Error::ShapeMismatch {
            primitive: "concat",
            details: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    let mut axis_total = 0usize;
    for t in ops {
        if t.rank() != rank
            || t.shape()[..axis] != ops[0].shape()[..axis]
            || t.shape()[axis + 1..] != ops[0].shape()[axis + 1..]
        {
            return Err(Error::ShapeMismatch {
                primitive: "concat",
                details: format!("shape {:?} does not align with {:?}", t.shape(), ops[0].shape()),
            });
        }
        axis_total += t.shape()[axis];
    }
    let mut shape = ops[0].shape().to_vec();
    shape[axis] = axis_total;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::ZERO; shape.iter().product()];
    let out_step = axis_total * inner;
    for o in 0..outer {
        let mut written = 0usize;
        for t in ops {
            let seg = t.shape()[axis] * inner;
            let src = &t.data()[o * seg..(o + 1) * seg];
            let dst = o * out_step + written;
            out[dst..dst + seg].copy_from_slice(src);
            written += seg;
        }
    }
    Ok(Tensor::result(out, shape, parents_of(ops), GradFn::Concat { axis }))
}

fn reduce_forward<T: Element>(x: &Tensor<T>, axis: Option<usize>, mean: bool) -> Result<Tensor<T>> {
    let grad_fn = if mean { GradFn::ReduceMean { axis } } else { GradFn::ReduceSum { axis } };
    match axis {
        None => {
            let mut s = T::ZERO;
            for &v in x.data() {
                s += v;
            }
            if mean {
                s = s / T::from_f64(x.len() as f64);
            }
            Ok(Tensor::result(vec![s], vec![1], vec![x.clone()], grad_fn))
        }
        Some(a) => {
            if a >= x.rank() {
                return Err(Error::ShapeMismatch {
                    primitive: if mean { "reduce_mean" } else { "reduce_sum" },
                    details: format!("axis {a} out of range for shape {:?}", x.shape()),
                });
            }
            let (outer, len, inner) = axis_segments(x.shape(), a);
            let xd = x.data();
            let mut out = vec![T::ZERO; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let base = o * len * inner + j * inner;
                    let orow = o * inner;
                    for i in 0..inner {
                        out[orow + i] += xd[base + i];
                    }
                }
            }
            if mean {
                let tn = T::from_f64(len as f64);
                for v in &mut out {
                    *v = *v / tn;
                }
            }
            let mut shape: Vec<usize> =
                x.shape().iter().enumerate().filter(|&(d, _)| d != a).map(|(_, &s)| s).collect();
            if shape.is_empty() {
                shape.push(1);
            }
            Ok(Tensor::result(out, shape, vec![x.clone()], grad_fn))
        }
    }
}

fn reduce_backward<T: Element>(
    parent_shape: &[usize],
    axis: Option<usize>,
    mean: bool,
    grad: &[T],
) -> Vec<T> {
    let numel: usize = parent_shape.iter().product();
    match axis {
        None => {
            let mut g = grad[0];
            if mean {
                g = g / T::from_f64(numel as f64);
            }
            vec![g; numel]
        }
        Some(a) => {
            let (outer, len, inner) = axis_segments(parent_shape, a);
            let scale = if mean { T::ONE / T::from_f64(len as f64) } else { T::ONE };
            let mut dx = vec![T::ZERO; numel];
            for o in 0..outer {
                for j in 0..len {
                    let base = o * len * inner + j * inner;
                    let grow = o * inner;
                    for i in 0..inner {
                        dx[base + i] = grad[grow + i] * scale;
                    }
                }
            }
            dx
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d

fn reflect_index(i: isize, size: usize) -> Option<usize> {
    if size == 1 {
        return Some(0);
    }
    let mut i = i;
    let n = size as isize;
    // One reflection is enough for padding < size.
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    if (0..n).contains(&i) {
        Some(i as usize)
    } else {
        None
    }
}

fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    reflect: bool,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            primitive: "conv2d",
            details: format!("expected (bs,ci,h,w) x (co,ci,kh,kw), got {xs:?} x {ws:?}"),
        });
    }
    if stride == 0 {
        return Err(Error::Contract("conv2d stride must be >= 1".into()));
    }
    let (bs, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if reflect && padding >= h.min(wd) {
        return Err(Error::ShapeMismatch {
            primitive: "conv2d",
            details: format!("reflect padding {padding} too large for input {h}x{wd}"),
        });
    }
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::ShapeMismatch {
            primitive: "conv2d",
            details: format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {padding})"),
        });
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![T::ZERO; bs * co * ho * wo];
    for b in 0..bs {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::ZERO;
                    for ic in 0..ci {
                        let xbase = (b * ci + ic) * h * wd;
                        let wbase = (oc * ci + ic) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let iy = if reflect {
                                reflect_index(iy, h)
                            } else if (0..h as isize).contains(&iy) {
                                Some(iy as usize)
                            } else {
                                None
                            };
                            let Some(iy) = iy else { continue };
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                let ix = if reflect {
                                    reflect_index(ix, wd)
                                } else if (0..wd as isize).contains(&ix) {
                                    Some(ix as usize)
                                } else {
                                    None
                                };
                                let Some(ix) = ix else { continue };
                                acc += xd[xbase + iy * wd + ix] * wdat[wbase + ky * kw + kx];
                            }
                        }
                    }
                    out[((b * co + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::result(
        out,
        vec![bs, co, ho, wo],
        vec![x.clone(), w.clone()],
        GradFn::Conv2d { stride, padding, reflect_pad: reflect },
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    out_shape: &[usize],
    stride: usize,
    padding: usize,
    reflect: bool,
    grad: &[T],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let xs = x.shape();
    let ws = w.shape();
    let (bs, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let (xd, wdat) = (x.data(), w.data());
    let mut dx = if x.requires_grad() { Some(vec![T::ZERO; xd.len()]) } else { None };
    let mut dw = if w.requires_grad() { Some(vec![T::ZERO; wdat.len()]) } else { None };
    for b in 0..bs {
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = grad[((b * co + oc) * ho + oy) * wo + ox];
                    for ic in 0..ci {
                        let xbase = (b * ci + ic) * h * wd;
                        let wbase = (oc * ci + ic) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let iy = if reflect {
                                reflect_index(iy, h)
                            } else if (0..h as isize).contains(&iy) {
                                Some(iy as usize)
                            } else {
                                None
                            };
                            let Some(iy) = iy else { continue };
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                let ix = if reflect {
                                    reflect_index(ix, wd)
                                } else if (0..wd as isize).contains(&ix) {
                                    Some(ix as usize)
                                } else {
                                    None
                                };
                                let Some(ix) = ix else { continue };
                                if let Some(dx) = dx.as_mut() {
                                    dx[xbase + iy * wd + ix] += g * wdat[wbase + ky * kw + kx];
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[wbase + ky * kw + kx] += g * xd[xbase + iy * wd + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

// ---------------------------------------------------------------------------
// batch norm

fn batch_norm_forward<T: Element>(
    ops: &[&Tensor<T>],
    eps: f64,
    training: bool,
) -> Result<Tensor<T>> {
    let expected = if training { 3 } else { 5 };
    if ops.len() != expected {
        return Err(Error::UnsupportedPrimitive(format!(
            "batch_norm expects {expected} operands in {} mode, got {}",
            if training { "training" } else { "inference" },
            ops.len()
        )));
    }
    let x = ops[0];
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::ShapeMismatch {
            primitive: "batch_norm",
            details: format!("expected rank-4 input, got {xs:?}"),
        });
    }
    let (bs, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    for (i, name) in ["gamma", "beta", "running_mean", "running_var"].iter().enumerate() {
        if let Some(t) = ops.get(i + 1) {
            if t.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    primitive: "batch_norm",
                    details: format!("{name} must have shape [{c}], got {:?}", t.shape()),
                });
            }
        }
    }
    let te = T::from_f64(eps);
    let area = bs * h * w;
    let tn = T::from_f64(area as f64);
    let xd = x.data();
    let gamma = ops[1].data();
    let beta = ops[2].data();
    let mut stats = Vec::with_capacity(c);
    for ch in 0..c {
        let (mean, var) = if training {
            let mut mean = T::ZERO;
            for b in 0..bs {
                let base = (b * c + ch) * h * w;
                for i in 0..h * w {
                    mean += xd[base + i];
                }
            }
            mean = mean / tn;
            let mut var = T::ZERO;
            for b in 0..bs {
                let base = (b * c + ch) * h * w;
                for i in 0..h * w {
                    let d = xd[base + i] - mean;
                    var += d * d;
                }
            }
            (mean, var / tn)
        } else {
            (ops[3].data()[ch], ops[4].data()[ch])
        };
        stats.push((mean, T::ONE / (var + te).sqrt()));
    }
    let mut out = vec![T::ZERO; xd.len()];
    for b in 0..bs {
        for ch in 0..c {
            let (mean, inv) = stats[ch];
            let scale = gamma[ch] * inv;
            let base = (b * c + ch) * h * w;
            for i in 0..h * w {
                out[base + i] = (xd[base + i] - mean) * scale + beta[ch];
            }
        }
    }
    Ok(Tensor::result(
        out,
        xs.to_vec(),
        parents_of(ops),
        GradFn::BatchNorm { training, stats },
    ))
}

fn batch_norm_backward<T: Element>(
    node: &Node<T>,
    training: bool,
    stats: &[(T, T)],
    grad: &[T],
) -> Vec<Option<Vec<T>>> {
    let x = &node.parents[0];
    let gamma = node.parents[1].data();
    let xs = x.shape();
    let (bs, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let area = bs * h * w;
    let tn = T::from_f64(area as f64);
    let xd = x.data();

    // Per-channel sums of g and g * x_hat.
    let mut sum_g = vec![T::ZERO; c];
    let mut sum_gx = vec![T::ZERO; c];
    for b in 0..bs {
        for ch in 0..c {
            let (mean, inv) = stats[ch];
            let base = (b * c + ch) * h * w;
            for i in 0..h * w {
                let g = grad[base + i];
                sum_g[ch] += g;
                sum_gx[ch] += g * (xd[base + i] - mean) * inv;
            }
        }
    }

    let dx = if x.requires_grad() {
        let mut dx = vec![T::ZERO; xd.len()];
        for b in 0..bs {
            for ch in 0..c {
                let (mean, inv) = stats[ch];
                let gscale = gamma[ch] * inv;
                let base = (b * c + ch) * h * w;
                for i in 0..h * w {
                    let g = grad[base + i];
                    dx[base + i] = if training {
                        let xh = (xd[base + i] - mean) * inv;
                        gscale * (g - sum_g[ch] / tn - xh * sum_gx[ch] / tn)
                    } else {
                        g * gscale
                    };
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    let dgamma = if node.parents[1].requires_grad() { Some(sum_gx) } else { None };
    let dbeta = if node.parents[2].requires_grad() { Some(sum_g) } else { None };
    let mut grads = vec![dx, dgamma, dbeta];
    // Running statistics never receive gradient.
    for _ in 3..node.parents.len() {
        grads.push(None);
    }
    grads
}

// ---------------------------------------------------------------------------
// masked fill / transpose

fn masked_fill_forward<T: Element>(
    x: &Tensor<T>,
    mask: Vec<bool>,
    mask_shape: Vec<usize>,
    value: f64,
) -> Result<Tensor<T>> {
    let numel: usize = mask_shape.iter().product();
    if numel != mask.len() || mask_shape.len() > x.rank() {
        return Err(Error::ShapeMismatch {
            primitive: "masked_fill",
            details: format!("mask shape {mask_shape:?} invalid for input {:?}", x.shape()),
        });
    }
    // Reuse broadcast machinery by viewing the mask as 0/1 values.
    broadcast_shape(x.shape(), &mask_shape, "masked_fill").and_then(|out_shape| {
        if out_shape != x.shape() {
            return Err(Error::ShapeMismatch {
                primitive: "masked_fill",
                details: format!(
                    "mask {mask_shape:?} must broadcast to input shape {:?}",
                    x.shape()
                ),
            });
        }
        Ok(())
    })?;
    let sel: Vec<T> = mask.iter().map(|&m| if m { T::ONE } else { T::ZERO }).collect();
    let v = T::from_f64(value);
    let mut out = vec![T::ZERO; x.len()];
    broadcast_zip(x.shape(), x.data(), x.shape(), &sel, &mask_shape, |i, xv, mv| {
        out[i] = if mv > T::ZERO { v } else { xv };
    });
    Ok(Tensor::result(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        GradFn::MaskedFill { mask, mask_shape },
    ))
}

fn masked_fill_backward<T: Element>(
    node: &Node<T>,
    mask: &[bool],
    mask_shape: &[usize],
    grad: &[T],
) -> Vec<T> {
    let sel: Vec<T> = mask.iter().map(|&m| if m { T::ONE } else { T::ZERO }).collect();
    let mut dx = vec![T::ZERO; grad.len()];
    broadcast_zip(&node.shape, grad, &node.shape, &sel, mask_shape, |i, g, mv| {
        dx[i] = if mv > T::ZERO { T::ZERO } else { g };
    });
    dx
}

fn transpose_forward<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::ShapeMismatch {
            primitive: "transpose",
            details: format!("axes {axes:?} is not a permutation of 0..{rank}"),
        });
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let mut out = vec![T::ZERO; x.len()];
    let xd = x.data();
    let mut coord = vec![0usize; rank];
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut in_off = 0usize;
    for slot in out.iter_mut() {
        *slot = xd[in_off];
        for d in (0..rank).rev() {
            coord[d] += 1;
            in_off += perm_strides[d];
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
            in_off -= perm_strides[d] * out_shape[d];
        }
    }
    Ok(Tensor::result(
        out,
        out_shape,
        vec![x.clone()],
        GradFn::Transpose { axes: axes.to_vec() },
    ))
}

// ---------------------------------------------------------------------------
// backward dispatch

/// Computes per-parent gradient contributions for one node.
pub(crate) fn backward_node<T: Element>(node: &Node<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
    let grad_fn = node.grad_fn.as_ref().expect("backward_node on leaf");
    let parent = |i: usize| -> &Tensor<T> { &node.parents[i] };
    let want = |i: usize| node.parents[i].requires_grad();
    match grad_fn {
        GradFn::Matmul => {
            let (da, db) = matmul_backward(parent(0), parent(1), grad);
            vec![da, db]
        }
        GradFn::Add | GradFn::Sub => {
            let mut out = Vec::with_capacity(2);
            for i in 0..2 {
                if want(i) {
                    let sign = if matches!(grad_fn, GradFn::Sub) && i == 1 { -T::ONE } else { T::ONE };
                    let full: Vec<T> = grad.iter().map(|&g| g * sign).collect();
                    out.push(Some(reduce_to_shape(&full, &node.shape, parent(i).shape())));
                } else {
                    out.push(None);
                }
            }
            out
        }
        GradFn::Mul | GradFn::Div => {
            let (a, b) = (parent(0), parent(1));
            let mut da_full = if want(0) { Some(vec![T::ZERO; grad.len()]) } else { None };
            let mut db_full = if want(1) { Some(vec![T::ZERO; grad.len()]) } else { None };
            let is_div = matches!(grad_fn, GradFn::Div);
            broadcast_zip(&node.shape, a.data(), a.shape(), b.data(), b.shape(), |i, av, bv| {
                let g = grad[i];
                if let Some(da) = da_full.as_mut() {
                    da[i] = if is_div { g / bv } else { g * bv };
                }
                if let Some(db) = db_full.as_mut() {
                    db[i] = if is_div { -g * av / (bv * bv) } else { g * av };
                }
            });
            vec![
                da_full.map(|f| reduce_to_shape(&f, &node.shape, a.shape())),
                db_full.map(|f| reduce_to_shape(&f, &node.shape, b.shape())),
            ]
        }
        GradFn::Relu => {
            let x = parent(0).data();
            vec![Some(
                grad.iter()
                    .zip(x)
                    .map(|(&g, &xv)| if xv > T::ZERO { g } else { T::ZERO })
                    .collect(),
            )]
        }
        GradFn::Sigmoid => {
            let y = &node.data;
            vec![Some(grad.iter().zip(y).map(|(&g, &yv)| g * yv * (T::ONE - yv)).collect())]
        }
        GradFn::Log => {
            let x = parent(0).data();
            vec![Some(grad.iter().zip(x).map(|(&g, &xv)| g / xv).collect())]
        }
        GradFn::Clamp { lo, hi } => {
            let x = parent(0).data();
            vec![Some(
                grad.iter()
                    .zip(x)
                    .map(|(&g, &xv)| if xv > *lo && xv < *hi { g } else { T::ZERO })
                    .collect(),
            )]
        }
        GradFn::AffineScale { scale } => {
            vec![Some(grad.iter().map(|&g| g * *scale).collect())]
        }
        GradFn::Softmax { axis } => vec![Some(softmax_backward(node, *axis, grad))],
        GradFn::LayerNorm { stats } => vec![Some(layer_norm_backward(node, stats, grad))],
        GradFn::Dropout { mask, inv_keep } => {
            vec![Some(
                grad.iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { g * *inv_keep } else { T::ZERO })
                    .collect(),
            )]
        }
        GradFn::Embedding { ids } => {
            let table = parent(0);
            let dim = table.shape()[1];
            let mut dt = vec![T::ZERO; table.len()];
            for (slot, &id) in ids.iter().enumerate() {
                let row = id as usize * dim;
                for j in 0..dim {
                    dt[row + j] += grad[slot * dim + j];
                }
            }
            vec![Some(dt)]
        }
        GradFn::Concat { axis } => {
            let outer: usize = node.shape[..*axis].iter().product();
            let inner: usize = node.shape[*axis + 1..].iter().product();
            let out_step = node.shape[*axis] * inner;
            let mut grads = Vec::with_capacity(node.parents.len());
            let mut offset = 0usize;
            for p in &node.parents {
                let seg = p.shape()[*axis] * inner;
                if p.requires_grad() {
                    let mut dp = vec![T::ZERO; p.len()];
                    for o in 0..outer {
                        let src = o * out_step + offset;
                        dp[o * seg..(o + 1) * seg].copy_from_slice(&grad[src..src + seg]);
                    }
                    grads.push(Some(dp));
                } else {
                    grads.push(None);
                }
                offset += seg;
            }
            grads
        }
        GradFn::Reshape => vec![Some(grad.to_vec())],
        GradFn::ReduceSum { axis } => {
            vec![Some(reduce_backward(parent(0).shape(), *axis, false, grad))]
        }
        GradFn::ReduceMean { axis } => {
            vec![Some(reduce_backward(parent(0).shape(), *axis, true, grad))]
        }
        GradFn::Conv2d { stride, padding, reflect_pad } => {
            let (dx, dw) =
                conv2d_backward(parent(0), parent(1), &node.shape, *stride, *padding, *reflect_pad, grad);
            vec![dx, dw]
        }
        GradFn::BatchNorm { training, stats } => batch_norm_backward(node, *training, stats, grad),
        GradFn::MaskedFill { mask, mask_shape } => {
            vec![Some(masked_fill_backward(node, mask, mask_shape, grad))]
        }
        GradFn::Transpose { axes } => {
            let mut inverse = vec![0usize; axes.len()];
            for (d, &a) in axes.iter().enumerate() {
                inverse[a] = d;
            }
            let g = Tensor::new(grad.to_vec(), &node.shape).expect("grad shape");
            let gt = transpose_forward(&g, &inverse).expect("inverse transpose");
            vec![Some(gt.data().to_vec())]
        }
    }
}
