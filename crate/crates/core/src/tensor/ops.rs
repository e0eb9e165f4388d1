//! Primitive kernels.
//!
//! Every kernel takes an optional [`Meter`] and reports the FLOPs it spends
//! and the output it materializes. Outputs are checked for finiteness.

use std::ops::Range;

use super::{with_meter, Meter, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

fn finish<T: Scalar>(
    op: &'static str,
    out: Tensor<T>,
    flops: u64,
    meter: &mut Option<&mut Meter>,
) -> Result<Tensor<T>> {
    out.ensure_finite(op)?;
    let bytes = out.size_bytes();
    with_meter(meter, |m| {
        m.add_flops(flops);
        m.alloc(bytes);
    });
    Ok(out)
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

// ── matrix products ────────────────────────────────────────────────────────

/// Batched product with optional transposition of either operand.
///
/// `a` is `[.., ar, ac]`; `b` is either rank 2 (shared by every batch item)
/// or has exactly `a`'s leading extents.
fn gemm_batched<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
    mut meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape(op, "operands need rank >= 2"));
    }
    let (ar, ac) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (br, bc) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(Error::shape(
            op,
            format!("inner extents differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let lead = &a.shape()[..a.rank() - 2];
    let shared_b = b.rank() == 2;
    if !shared_b && &b.shape()[..b.rank() - 2] != lead {
        return Err(Error::shape(
            op,
            format!("batch extents differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let batch: usize = lead.iter().product();
    let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };

    // Split large single products into row blocks so the parallel build has
    // work to share; each output element is still owned by one gemm call.
    let rows_per_task = if batch == 1 && m >= 256 { 64 } else { m };
    let tasks_per_item = m.div_ceil(rows_per_task);

    let mut out = vec![T::zero(); batch * m * n];
    let (a_data, b_data) = (a.data(), b.data());
    par::for_each_chunk_mut(&mut out, rows_per_task * n, |task, chunk| {
        let item = task / tasks_per_item;
        let row0 = (task % tasks_per_item) * rows_per_task;
        let rows = chunk.len() / n;
        let a_off = item * ar * ac + row0 * rsa as usize;
        let b_off = if shared_b { 0 } else { item * br * bc };
        // SAFETY: offsets and strides stay inside the validated buffers and
        // `chunk` is a disjoint slice of `out`.
        unsafe {
            T::gemm(
                rows,
                k,
                n,
                a_data.as_ptr().add(a_off),
                rsa,
                csa,
                b_data.as_ptr().add(b_off),
                rsb,
                csb,
                T::zero(),
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    let mut shape = lead.to_vec();
    shape.extend([m, n]);
    let flops = 2 * (batch * m * k * n) as u64;
    finish(op, Tensor::from_parts(shape, out), flops, &mut meter)
}

/// `a·b` for `a: [.., m, k]` and `b: [k, n]` or `[.., k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    gemm_batched("matmul", a, false, b, false, meter)
}

/// `a·bᵀ` for `a: [.., m, k]` and `b: [n, k]` or `[.., n, k]`, without
/// materializing the transpose.
pub fn matmul_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    gemm_batched("matmul_bt", a, false, b, true, meter)
}

/// `aᵀ·b` for `a: [.., k, m]` and `b: [.., k, n]`.
pub fn matmul_at<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    gemm_batched("matmul_at", a, true, b, false, meter)
}

// ── softmax ────────────────────────────────────────────────────────────────

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Numerically stable softmax over the last axis, in place.
pub fn softmax_lastdim_inplace<T: Scalar>(x: &mut Tensor<T>, mut meter: Option<&mut Meter>) -> Result<()> {
    let n = x.last_dim();
    let rows = x.rows();
    let rows_per_task = (8192 / n).max(1);
    par::for_each_chunk_mut(x.data_mut(), rows_per_task * n, |_, chunk| {
        chunk.chunks_mut(n).for_each(softmax_row);
    });
    x.ensure_finite("softmax_lastdim")?;
    with_meter(&mut meter, |m| m.add_flops(5 * (rows * n) as u64));
    Ok(())
}

/// Softmax over the last axis: max-subtract, exponentiate, normalize.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>, mut meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    softmax_lastdim_inplace(&mut out, meter.as_deref_mut())?;
    let bytes = out.size_bytes();
    with_meter(&mut meter, |m| m.alloc(bytes));
    Ok(out)
}

// ── pooling ────────────────────────────────────────────────────────────────

/// Input rows `[floor(i·n/out), floor((i+1)·n/out))` covered by output cell `i`.
pub fn pool_window(i: usize, n: usize, out: usize) -> Range<usize> {
    (i * n / out)..((i + 1) * n / out)
}

fn grid_dims<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if x.rank() < 3 {
        return Err(Error::shape(op, format!("expected [.., H, W, d], got {:?}", x.shape())));
    }
    let r = x.rank();
    let (h, w, d) = (x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]);
    Ok((x.len() / (h * w * d), h, w, d))
}

/// Adaptive average pooling of a `[.., Hg, Wg, d]` grid to `[.., out_h, out_w, d]`.
///
/// Windows use floor boundaries on both ends, so they tile the grid exactly.
pub fn adaptive_avg_pool2d<T: Scalar>(
    grid: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    mut meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    const OP: &str = "adaptive_avg_pool2d";
    let (batch, h, w, d) = grid_dims(OP, grid)?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::invalid(
            OP,
            format!("output {out_h}x{out_w} must lie in 1..={h} x 1..={w}"),
        ));
    }
    let src = grid.data();
    let mut out = vec![T::zero(); batch * out_h * out_w * d];
    par::for_each_chunk_mut(&mut out, out_h * out_w * d, |b, dst| {
        let base = b * h * w * d;
        for i in 0..out_h {
            let rows = pool_window(i, h, out_h);
            for j in 0..out_w {
                let cols = pool_window(j, w, out_w);
                let cell = &mut dst[(i * out_w + j) * d..][..d];
                for r in rows.clone() {
                    for c in cols.clone() {
                        let px = &src[base + (r * w + c) * d..][..d];
                        cell.iter_mut().zip(px).for_each(|(o, &v)| *o = *o + v);
                    }
                }
                let count = T::from_f64((rows.len() * cols.len()) as f64);
                cell.iter_mut().for_each(|o| *o = *o / count);
            }
        }
    });
    let mut shape = grid.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = out_h;
    shape[r - 2] = out_w;
    let flops = (batch * (h * w + out_h * out_w) * d) as u64;
    finish(OP, Tensor::from_parts(shape, out), flops, &mut meter)
}

/// Number of in-bounds cells of the 3×3 neighbourhood around `(r, c)`.
pub(crate) fn neighbourhood(r: usize, c: usize, h: usize, w: usize) -> (Range<usize>, Range<usize>) {
    (r.saturating_sub(1)..(r + 2).min(h), c.saturating_sub(1)..(c + 2).min(w))
}

/// Stride-1 3×3 mean over a zero-padded `[.., H, W, d]` grid. The divisor
/// is always 9, so a constant offset does not cancel at the border.
pub fn avg_pool3x3<T: Scalar>(grid: &Tensor<T>, mut meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    const OP: &str = "avg_pool3x3";
    let (batch, h, w, d) = grid_dims(OP, grid)?;
    let src = grid.data();
    let mut out = vec![T::zero(); grid.len()];
    let mut flops = 0u64;
    for r in 0..h {
        for c in 0..w {
            let (rr, cc) = neighbourhood(r, c, h, w);
            flops += (rr.len() * cc.len() + 1) as u64;
        }
    }
    par::for_each_chunk_mut(&mut out, h * w * d, |b, dst| {
        let base = b * h * w * d;
        for r in 0..h {
            for c in 0..w {
                let (rr, cc) = neighbourhood(r, c, h, w);
                let cell = &mut dst[(r * w + c) * d..][..d];
                let count = T::from_f64(9.0);
                for i in rr {
                    for j in cc.clone() {
                        let px = &src[base + (i * w + j) * d..][..d];
                        cell.iter_mut().zip(px).for_each(|(o, &v)| *o = *o + v);
                    }
                }
                cell.iter_mut().for_each(|o| *o = *o / count);
            }
        }
    });
    finish(OP, Tensor::from_parts(grid.shape().to_vec(), out), flops * (batch * d) as u64, &mut meter)
}

// ── normalization and activations ──────────────────────────────────────────

/// Layer normalization over the last axis with population variance.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    mut meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    const OP: &str = "layernorm";
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            OP,
            format!("gamma {:?} / beta {:?} vs channels {c}", gamma.shape(), beta.shape()),
        ));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::invalid(OP, format!("eps must be >= 0, got {eps}")));
    }
    let eps = T::from_f64(eps);
    let inv_c = T::from_f64(1.0 / c as f64);
    let (g, bta) = (gamma.data(), beta.data());
    let mut out = x.data().to_vec();
    par::for_each_chunk_mut(&mut out, c * (4096 / c).max(1), |_, chunk| {
        for row in chunk.chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = (var + eps).sqrt().recip();
            for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(bta) {
                *v = (*v - mean) * rstd * gi + bi;
            }
        }
    });
    let flops = 7 * x.len() as u64;
    finish(OP, Tensor::from_parts(x.shape().to_vec(), out), flops, &mut meter)
}

pub(crate) const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inner = T::from_f64(GELU_K) * (x + T::from_f64(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn map_unary<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    f: impl Fn(T) -> T + Sync + Send,
    mut meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, 16384, |i, chunk| {
        let s = &src[i * 16384..][..chunk.len()];
        chunk.iter_mut().zip(s).for_each(|(o, &v)| *o = f(v));
    });
    finish(op, Tensor::from_parts(x.shape().to_vec(), out), x.len() as u64, &mut meter)
}

fn zip_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
    mut meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    finish(op, Tensor::from_parts(a.shape().to_vec(), out), a.len() as u64, &mut meter)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>, meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    map_unary("gelu", x, gelu_scalar, meter)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    zip_binary("add", a, b, |x, y| x + y, meter)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    zip_binary("sub", a, b, |x, y| x - y, meter)
}

/// Elementwise (Hadamard) product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    zip_binary("mul", a, b, |x, y| x * y, meter)
}

/// Adds a `[c]` bias to every row of `[.., c]`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>, mut meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if bias.shape() != [c] {
        return Err(Error::shape("add_bias", format!("bias {:?} vs channels {c}", bias.shape())));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        row.iter_mut().zip(bias.data()).for_each(|(o, &b)| *o = *o + b);
    }
    finish("add_bias", Tensor::from_parts(x.shape().to_vec(), out), x.len() as u64, &mut meter)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: f64, meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    let s = T::from_f64(s);
    map_unary("scale", x, move |v| v * s, meter)
}

pub fn scale_inplace<T: Scalar>(x: &mut Tensor<T>, s: f64, mut meter: Option<&mut Meter>) -> Result<()> {
    let s = T::from_f64(s);
    x.data_mut().iter_mut().for_each(|v| *v = *v * s);
    x.ensure_finite("scale")?;
    with_meter(&mut meter, |m| m.add_flops(x.len() as u64));
    Ok(())
}

// ── structural ops ─────────────────────────────────────────────────────────

/// Swaps the last two axes, materializing the result.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>, mut meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape("transpose_last2", "needs rank >= 2"));
    }
    let r = x.rank();
    let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, rows * cols, |b, dst| {
        let s = &src[b * rows * cols..][..rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = s[i * cols + j];
            }
        }
    });
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    finish("transpose_last2", Tensor::from_parts(shape, out), 0, &mut meter)
}

/// Concatenates along the last axis; all leading extents must agree.
pub fn concat_lastdim<T: Scalar>(parts: &[&Tensor<T>], mut meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_lastdim", "no inputs"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::shape(
                "concat_lastdim",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
    }
    let total: usize = parts.iter().map(|p| p.last_dim()).sum();
    let rows = first.rows();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let w = p.last_dim();
            out.extend_from_slice(&p.data()[r * w..][..w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    finish("concat_lastdim", Tensor::from_parts(shape, out), 0, &mut meter)
}

/// Copies `x` into a new tensor of the given shape.
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize], mut meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    let out = x.clone().into_shape(shape.to_vec())?;
    finish("reshape", out, 0, &mut meter)
}

// ── reductions and statistics ──────────────────────────────────────────────

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> f64 {
    x.data().iter().map(|v| v.as_f64()).sum()
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> f64 {
    sum_all(x) / x.len() as f64
}

/// Population variance along `axis`; the axis is removed from the shape
/// (a rank-1 input yields shape `[1]`).
pub fn variance_over_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::invalid(
            "variance_over_axis",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let n = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let src = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| src[(o * n + j) * inner + i].as_f64();
            let mean = (0..n).map(at).sum::<f64>() / n as f64;
            let var = (0..n).map(|j| (at(j) - mean).powi(2)).sum::<f64>() / n as f64;
            out.push(T::from_f64(var));
        }
    }
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}

/// Cosine similarity of the flattened tensors. A single zero vector yields
/// 0; two zero vectors are an error.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", format!("{} vs {} elements", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 && nb == 0.0 {
        return Err(Error::invalid("cosine_similarity", "both vectors are zero"));
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}
