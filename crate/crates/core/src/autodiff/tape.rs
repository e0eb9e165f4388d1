use std::sync::atomic::{AtomicU64, Ordering};

use crate::attention::{head_mix, merge_heads, split_heads};
use crate::error::{Error, Result};
use crate::tensor::ops::{self, neighbourhood, pool_window, GELU_C, GELU_K};
use crate::tensor::{Meter, Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Reshape(Var),
    AdaptivePool(Var),
    AvgPool3x3(Var),
    SplitHeads(Var),
    MergeHeads(Var),
    HeadMix { x: Var, w: Var },
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of forward values and the ops that produced them.
///
/// Nodes are stored in creation order, which is a topological order because
/// an op can only consume handles that already exist.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    meter: Option<Meter>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, zeros if `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape || v.index >= self.shapes.len() {
            return Err(Error::Autodiff(format!("variable {} is not part of this backward pass", v.index)));
        }
        match &self.grads[v.index] {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(self.shapes[v.index].clone()),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), meter: None }
    }

    /// Tape whose forward ops report FLOPs and allocations to an internal meter.
    pub fn with_meter() -> Self {
        Tape { meter: Some(Meter::new()), ..Self::new() }
    }

    pub fn meter(&self) -> Option<&Meter> {
        self.meter.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autodiff(format!(
                "node {} used before definition on this tape",
                v.index
            )));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var { index: self.nodes.len() - 1, tape: self.id }
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    // ── recorded ops ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let mut meter = self.meter.take();
        let out = ops::matmul(self.val(a), self.val(b), meter.as_mut());
        self.meter = meter;
        Ok(self.push(out?, Op::MatMul { a, b, b_transposed: false }))
    }

    /// `a·bᵀ`; with a rank-2 `b` this is a bias-free linear layer.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let mut meter = self.meter.take();
        let out = ops::matmul_bt(self.val(a), self.val(b), meter.as_mut());
        self.meter = meter;
        Ok(self.push(out?, Op::MatMul { a, b, b_transposed: true }))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x, m| ops::transpose_last2(x, m), Op::Transpose(a))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x, m| ops::softmax_lastdim(x, m), Op::Softmax(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x, m| ops::gelu(x, m), Op::Gelu(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |x, m| ops::scale(x, s, m), Op::Scale(a, s))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, |x, m| ops::reshape(x, shape, m), Op::Reshape(a))
    }

    pub fn adaptive_avg_pool2d(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.unary(a, |x, m| ops::adaptive_avg_pool2d(x, out_h, out_w, m), Op::AdaptivePool(a))
    }

    pub fn avg_pool3x3(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x, m| ops::avg_pool3x3(x, m), Op::AvgPool3x3(a))
    }

    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        self.unary(a, |x, m| split_heads(x, heads, m), Op::SplitHeads(a))
    }

    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x, m| merge_heads(x, m), Op::MergeHeads(a))
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl FnOnce(&Tensor<T>, Option<&mut Meter>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Var> {
        self.check(a)?;
        let mut meter = self.meter.take();
        let out = f(self.val(a), meter.as_mut());
        self.meter = meter;
        Ok(self.push(out?, op))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>, Option<&mut Meter>) -> Result<Tensor<T>>,
        op: Op<T>,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let mut meter = self.meter.take();
        let out = f(self.val(a), self.val(b), meter.as_mut());
        self.meter = meter;
        Ok(self.push(out?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y, m| ops::add(x, y, m), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y, m| ops::sub(x, y, m), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y, m| ops::mul(x, y, m), Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.binary(a, bias, |x, y, m| ops::add_bias(x, y, m), Op::AddBias(a, bias))
    }

    /// Mixes a `[.., H, R, C]` stack along the head axis with `w: [H, H]`.
    pub fn head_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        self.binary(x, w, |s, m, meter| head_mix(s, m, meter), Op::HeadMix { x, w })
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let mut meter = self.meter.take();
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.val(p)).collect();
        let out = ops::concat_lastdim(&values, meter.as_mut());
        self.meter = meter;
        Ok(self.push(out?, Op::Concat(parts.to_vec())))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        let mut meter = self.meter.take();
        let out = ops::layernorm(self.val(x), self.val(gamma), self.val(beta), eps, meter.as_mut());
        self.meter = meter;
        let out = out?;
        let xv = self.val(x);
        let c = xv.last_dim();
        let inv_c = 1.0 / c as f64;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / c);
        for row in xv.data().chunks(c) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() * inv_c;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() * inv_c;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(T::from_f64(r));
            xhat.extend(row.iter().map(|v| T::from_f64((v.as_f64() - mean) * r)));
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = T::from_f64(ops::sum_all(self.val(a)));
        let out = Tensor::new([1], vec![s])?;
        Ok(self.push(out, Op::SumAll(a)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = T::from_f64(ops::mean_all(self.val(a)));
        let out = Tensor::new([1], vec![s])?;
        Ok(self.push(out, Op::MeanAll(a)))
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.val(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} labels", lv.shape(), labels.len()),
            ));
        }
        let k = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} outside 0..{k}")));
        }
        let probs = ops::softmax_lastdim(lv, None)?;
        let mut loss = 0.0;
        for (row, &l) in lv.data().chunks(k).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[l].as_f64();
        }
        let out = Tensor::new([1], vec![T::from_f64(loss / labels.len() as f64)])?;
        Ok(self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    // ── reverse pass ───────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`, visiting each node once.
    /// Forward values are left untouched, so repeated calls agree.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if self.val(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Tensor::ones(self.val(loss).shape().to_vec())?);
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.adjoint(i, &g)? {
                accumulate(&mut grads[input.index], contribution)?;
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..=loss.index].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { tape: self.id, grads, shapes })
    }

    /// Input adjoints of node `i` given its output adjoint `g`.
    fn adjoint(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, b_transposed } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let shared = bv.rank() == 2 && av.rank() > 2;
                let ga = if *b_transposed { ops::matmul(g, bv, None)? } else { ops::matmul_bt(g, bv, None)? };
                let gb = if shared {
                    // shared right operand: sum over the batch by flattening rows
                    let rows = av.len() / av.last_dim();
                    let a2 = av.clone().into_shape([rows, av.last_dim()])?;
                    let g2 = g.clone().into_shape([rows, g.last_dim()])?;
                    if *b_transposed { ops::matmul_at(&g2, &a2, None)? } else { ops::matmul_at(&a2, &g2, None)? }
                } else if *b_transposed {
                    ops::matmul_at(g, av, None)?
                } else {
                    ops::matmul_at(av, g, None)?
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, ops::transpose_last2(g, None)?)],
            Op::Softmax(a) => {
                let n = y.last_dim();
                let mut out = vec![T::zero(); y.len()];
                for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in o.iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), out)?)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = y.last_dim();
                let gam = self.val(*gamma).data();
                let mut dx = vec![T::zero(); y.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let inv_c = T::from_f64(1.0 / c as f64);
                for (r, ((gr, xr), dxr)) in g.data().chunks(c).zip(xhat.chunks(c)).zip(dx.chunks_mut(c)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..c {
                        dgamma[j] = dgamma[j] + gr[j] * xr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        let d = gr[j] * gam[j];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xr[j];
                    }
                    mean_d = mean_d * inv_c;
                    mean_dx = mean_dx * inv_c;
                    for j in 0..c {
                        dxr[j] = rstd[r] * (gr[j] * gam[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                vec![
                    (*x, Tensor::new(y.shape().to_vec(), dx)?),
                    (*gamma, Tensor::new([c], dgamma)?),
                    (*beta, Tensor::new([c], dbeta)?),
                ]
            }
            Op::Gelu(a) => {
                let xv = self.val(*a);
                let (k, cc) = (T::from_f64(GELU_K), T::from_f64(GELU_C));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let out = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gi)| {
                        let t = (k * (x + cc * x * x * x)).tanh();
                        let d = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * cc * x * x);
                        gi * d
                    })
                    .collect();
                vec![(*a, Tensor::new(xv.shape().to_vec(), out)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, ops::scale(g, -1.0, None)?)],
            Op::Mul(a, b) => vec![
                (*a, ops::mul(g, self.val(*b), None)?),
                (*b, ops::mul(g, self.val(*a), None)?),
            ],
            Op::AddBias(a, bias) => {
                let c = g.last_dim();
                let mut gb = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
                }
                vec![(*a, g.clone()), (*bias, Tensor::new([c], gb)?)]
            }
            Op::Scale(a, s) => vec![(*a, ops::scale(g, *s, None)?)],
            Op::Concat(parts) => {
                let total = g.last_dim();
                let rows = g.len() / total;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pv = self.val(p);
                    let w = pv.last_dim();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..][..w]);
                    }
                    out.push((p, Tensor::new(pv.shape().to_vec(), data)?));
                    offset += w;
                }
                out
            }
            Op::Reshape(a) => vec![(*a, g.clone().into_shape(self.val(*a).shape().to_vec())?)],
            Op::AdaptivePool(a) => vec![(*a, adaptive_pool_adjoint(self.val(*a), g)?)],
            Op::AvgPool3x3(a) => vec![(*a, avg_pool3x3_adjoint(g)?)],
            Op::SplitHeads(a) => vec![(*a, merge_heads(g, None)?)],
            Op::MergeHeads(a) => {
                let heads = self.val(*a).shape()[self.val(*a).rank() - 3];
                vec![(*a, split_heads(g, heads, None)?)]
            }
            Op::HeadMix { x, w } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let wt = ops::transpose_last2(wv, None)?;
                let gx = head_mix(g, &wt, None)?;
                // dW = Σ_b g_b · x_bᵀ over [H, plane] blocks
                let heads = wv.shape()[0];
                let plane = xv.len() / xv.shape()[..xv.rank() - 2].iter().product::<usize>();
                let batch = xv.len() / (heads * plane);
                let g3 = g.clone().into_shape([batch, heads, plane])?;
                let x3 = xv.clone().into_shape([batch, heads, plane])?;
                let per = ops::matmul_bt(&g3, &x3, None)?;
                let mut gw = vec![T::zero(); heads * heads];
                for blk in per.data().chunks(heads * heads) {
                    gw.iter_mut().zip(blk).for_each(|(s, &v)| *s = *s + v);
                }
                vec![(*x, gx), (*w, Tensor::new([heads, heads], gw)?)]
            }
            Op::SumAll(a) => {
                let shape = self.val(*a).shape().to_vec();
                vec![(*a, Tensor::full(shape, g.data()[0])?)]
            }
            Op::MeanAll(a) => {
                let av = self.val(*a);
                let v = g.data()[0] / T::from_f64(av.len() as f64);
                vec![(*a, Tensor::full(av.shape().to_vec(), v)?)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.last_dim();
                let scale = g.data()[0] / T::from_f64(labels.len() as f64);
                let mut d = probs.data().to_vec();
                for (row, &l) in d.chunks_mut(k).zip(labels) {
                    row[l] = row[l] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                vec![(*logits, Tensor::new(probs.shape().to_vec(), d)?)]
            }
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::Autodiff(format!(
                    "adjoint shape {:?} does not match {:?}",
                    g.shape(),
                    acc.shape()
                )));
            }
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b);
        }
    }
    Ok(())
}

fn adaptive_pool_adjoint<T: Scalar>(input: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let r = input.rank();
    let (h, w, d) = (input.shape()[r - 3], input.shape()[r - 2], input.shape()[r - 1]);
    let (oh, ow) = (g.shape()[r - 3], g.shape()[r - 2]);
    let batch = input.len() / (h * w * d);
    let mut out = vec![T::zero(); input.len()];
    for b in 0..batch {
        for i in 0..oh {
            let rows = pool_window(i, h, oh);
            for j in 0..ow {
                let cols = pool_window(j, w, ow);
                let count = T::from_f64((rows.len() * cols.len()) as f64);
                let gcell = &g.data()[((b * oh + i) * ow + j) * d..][..d];
                for rr in rows.clone() {
                    for cc in cols.clone() {
                        let dst = &mut out[((b * h + rr) * w + cc) * d..][..d];
                        dst.iter_mut().zip(gcell).for_each(|(o, &v)| *o = *o + v / count);
                    }
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

fn avg_pool3x3_adjoint<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let r = g.rank();
    let (h, w, d) = (g.shape()[r - 3], g.shape()[r - 2], g.shape()[r - 1]);
    let batch = g.len() / (h * w * d);
    let mut out = vec![T::zero(); g.len()];
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                // (i, j) lies in the neighbourhood of (r, c) exactly when
                // (r, c) lies in the neighbourhood of (i, j)
                let (rr, cc) = neighbourhood(i, j, h, w);
                let dst_at = ((b * h + i) * w + j) * d;
                for r2 in rr {
                    for c2 in cc.clone() {
                        let count = T::from_f64(9.0);
                        let src = &g.data()[((b * h + r2) * w + c2) * d..][..d];
                        let dst = &mut out[dst_at..][..d];
                        dst.iter_mut().zip(src).for_each(|(o, &v)| *o = *o + v / count);
                    }
                }
            }
        }
    }
    Tensor::new(g.shape().to_vec(), out)
}
