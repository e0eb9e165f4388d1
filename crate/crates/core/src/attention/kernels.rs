use super::{head_mix, merge_heads, project_qkv, split_heads, AttnConfig, DecomposedAttn, HeadMixWeights, QkvWeights};
use crate::error::{Error, Result};
use crate::tensor::{ops, with_meter, Meter, Scalar, Tensor};

/// Largest token count the dense oracle will materialize `N×N` for.
pub const DENSE_ORACLE_MAX_TOKENS: usize = 4096;

fn release<T: Scalar>(meter: &mut Option<&mut Meter>, t: Tensor<T>) {
    let bytes = t.size_bytes();
    with_meter(meter, |m| m.release(bytes));
}

/// Splits `x` into heads and drops the unsplit copy from the live set.
fn into_heads<T: Scalar>(x: Tensor<T>, heads: usize, meter: &mut Option<&mut Meter>) -> Result<Tensor<T>> {
    let h = split_heads(&x, heads, meter.as_deref_mut())?;
    release(meter, x);
    Ok(h)
}

fn finish_heads<T: Scalar>(o: Tensor<T>, meter: &mut Option<&mut Meter>) -> Result<Tensor<T>> {
    let out = merge_heads(&o, meter.as_deref_mut())?;
    release(meter, o);
    Ok(out)
}

fn full_attention<T: Scalar>(
    op: &'static str,
    z: &Tensor<T>,
    w: &QkvWeights<T>,
    mix: Option<(&Tensor<T>, &Tensor<T>)>,
    cfg: &AttnConfig,
    mut meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    cfg.check_tokens(op, z)?;
    let heads = cfg.num_heads();
    let (q, k, v) = project_qkv(z, w, meter.as_deref_mut())?;
    let qh = into_heads(q, heads, &mut meter)?;
    let kh = into_heads(k, heads, &mut meter)?;
    let vh = into_heads(v, heads, &mut meter)?;

    let mut scores = ops::matmul_bt(&qh, &kh, meter.as_deref_mut())?;
    release(&mut meter, qh);
    release(&mut meter, kh);
    ops::scale_inplace(&mut scores, cfg.scale(), meter.as_deref_mut())?;
    let attn = match mix {
        None => {
            ops::softmax_lastdim_inplace(&mut scores, meter.as_deref_mut())?;
            scores
        }
        Some((w1, w2)) => {
            let mut mixed = head_mix(&scores, w1, meter.as_deref_mut())?;
            release(&mut meter, scores);
            ops::softmax_lastdim_inplace(&mut mixed, meter.as_deref_mut())?;
            let out = head_mix(&mixed, w2, meter.as_deref_mut())?;
            release(&mut meter, mixed);
            out
        }
    };
    let o = ops::matmul(&attn, &vh, meter.as_deref_mut())?;
    release(&mut meter, attn);
    release(&mut meter, vh);
    finish_heads(o, &mut meter)
}

/// Baseline multi-head self-attention on `z: [N, c]`.
///
/// Materializes the `[H, N, N]` attention stack.
pub fn mhsa_forward<T: Scalar>(
    z: &Tensor<T>,
    w: &QkvWeights<T>,
    cfg: &AttnConfig,
    meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    full_attention("mhsa_forward", z, w, None, cfg, meter)
}

/// MHSA with cross-head interaction on the full `[H, N, N]` maps:
/// `A = W2 ⊙ softmax(W1 ⊙ S)`. Uses only `w1_q` and `w2_q`.
pub fn mhsa_interactive_forward<T: Scalar>(
    z: &Tensor<T>,
    w: &QkvWeights<T>,
    mix: &HeadMixWeights<T>,
    cfg: &AttnConfig,
    meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    check_mix("mhsa_interactive_forward", mix, cfg)?;
    full_attention("mhsa_interactive_forward", z, w, Some((&mix.w1_q, &mix.w2_q)), cfg, meter)
}

fn check_mix<T: Scalar>(op: &'static str, mix: &HeadMixWeights<T>, cfg: &AttnConfig) -> Result<()> {
    if mix.heads() != cfg.num_heads() {
        return Err(Error::shape(op, format!("mix has {} heads, config {}", mix.heads(), cfg.num_heads())));
    }
    Ok(())
}

/// Average-pools the query and key grids `[Hg, Wg, c]` down to the landmark
/// grid and flattens them row-major to `[L, c]`.
pub fn compute_landmarks<T: Scalar>(
    q_grid: &Tensor<T>,
    k_grid: &Tensor<T>,
    cfg: &AttnConfig,
    mut meter: Option<&mut Meter>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (hg, wg) = cfg.token_grid();
    let want = [hg, wg, cfg.channels()];
    for g in [q_grid, k_grid] {
        if g.shape() != want {
            return Err(Error::shape("compute_landmarks", format!("grid {:?}, expected {want:?}", g.shape())));
        }
    }
    let (lh, lw) = cfg.landmark_grid();
    let landmarks = [cfg.num_landmarks(), cfg.channels()];
    let q = ops::adaptive_avg_pool2d(q_grid, lh, lw, meter.as_deref_mut())?.into_shape(landmarks)?;
    let k = ops::adaptive_avg_pool2d(k_grid, lh, lw, meter)?.into_shape(landmarks)?;
    Ok((q, k))
}

/// One decomposed factor: `mix2 ⊙ softmax(mix1 ⊙ (rows·colsᵀ·scale))`.
fn factor<T: Scalar>(
    rows: &Tensor<T>,
    cols: &Tensor<T>,
    mix: Option<(&Tensor<T>, &Tensor<T>)>,
    scale: f64,
    meter: &mut Option<&mut Meter>,
) -> Result<Tensor<T>> {
    let mut raw = ops::matmul_bt(rows, cols, meter.as_deref_mut())?;
    ops::scale_inplace(&mut raw, scale, meter.as_deref_mut())?;
    match mix {
        None => {
            ops::softmax_lastdim_inplace(&mut raw, meter.as_deref_mut())?;
            Ok(raw)
        }
        Some((w1, w2)) => {
            let mut mixed = head_mix(&raw, w1, meter.as_deref_mut())?;
            release(meter, raw);
            ops::softmax_lastdim_inplace(&mut mixed, meter.as_deref_mut())?;
            let out = head_mix(&mixed, w2, meter.as_deref_mut())?;
            release(meter, mixed);
            Ok(out)
        }
    }
}

/// Query-side `A_Q = softmax(Q·kᵀ·s)` (`[H, N, L]`) and key-side
/// `A_K = softmax(q·Kᵀ·s)` (`[H, L, N]`), each optionally wrapped in
/// cross-head interaction.
pub fn decomposed_attention<T: Scalar>(
    queries: &Tensor<T>,
    keys: &Tensor<T>,
    q_landmarks: &Tensor<T>,
    k_landmarks: &Tensor<T>,
    cfg: &AttnConfig,
    mix: Option<&HeadMixWeights<T>>,
    mut meter: Option<&mut Meter>,
) -> Result<DecomposedAttn<T>> {
    const OP: &str = "decomposed_attention";
    let (n, l, c) = (cfg.num_tokens(), cfg.num_landmarks(), cfg.channels());
    for (t, rows) in [(queries, n), (keys, n), (q_landmarks, l), (k_landmarks, l)] {
        if t.shape() != [rows, c] {
            return Err(Error::shape(OP, format!("{:?}, expected [{rows}, {c}]", t.shape())));
        }
    }
    if let Some(m) = mix {
        check_mix(OP, m, cfg)?;
    }
    let heads = cfg.num_heads();
    let qh = split_heads(queries, heads, meter.as_deref_mut())?;
    let kl = split_heads(k_landmarks, heads, meter.as_deref_mut())?;
    let a_q = factor(&qh, &kl, mix.map(|m| (&m.w1_q, &m.w2_q)), cfg.scale(), &mut meter)?;
    release(&mut meter, qh);
    release(&mut meter, kl);

    let ql = split_heads(q_landmarks, heads, meter.as_deref_mut())?;
    let kh = split_heads(keys, heads, meter.as_deref_mut())?;
    let a_k = factor(&ql, &kh, mix.map(|m| (&m.w1_k, &m.w2_k)), cfg.scale(), &mut meter)?;
    release(&mut meter, ql);
    release(&mut meter, kh);
    Ok(DecomposedAttn { a_q, a_k })
}

/// Projection, landmarks and both decomposed factors, plus the per-head values.
fn factors_and_values<T: Scalar>(
    op: &'static str,
    z: &Tensor<T>,
    w: &QkvWeights<T>,
    mix: Option<&HeadMixWeights<T>>,
    cfg: &AttnConfig,
    meter: &mut Option<&mut Meter>,
) -> Result<(DecomposedAttn<T>, Tensor<T>)> {
    cfg.check_tokens(op, z)?;
    let (hg, wg) = cfg.token_grid();
    let c = cfg.channels();
    let (q, k, v) = project_qkv(z, w, meter.as_deref_mut())?;
    let q = q.into_shape([hg, wg, c])?;
    let k = k.into_shape([hg, wg, c])?;
    let (ql, kl) = compute_landmarks(&q, &k, cfg, meter.as_deref_mut())?;
    let n = cfg.num_tokens();
    let (q, k) = (q.into_shape([n, c])?, k.into_shape([n, c])?);
    let attn = decomposed_attention(&q, &k, &ql, &kl, cfg, mix, meter.as_deref_mut())?;
    for t in [q, k, ql, kl] {
        release(meter, t);
    }
    let vh = into_heads(v, cfg.num_heads(), meter)?;
    Ok((attn, vh))
}

fn linear_attention<T: Scalar>(
    op: &'static str,
    z: &Tensor<T>,
    w: &QkvWeights<T>,
    mix: Option<&HeadMixWeights<T>>,
    cfg: &AttnConfig,
    mut meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    let (DecomposedAttn { a_q, a_k }, vh) = factors_and_values(op, z, w, mix, cfg, &mut meter)?;
    // A_Q·(A_K·V): [H, L, d] first, then [H, N, d]
    let kv = ops::matmul(&a_k, &vh, meter.as_deref_mut())?;
    release(&mut meter, a_k);
    release(&mut meter, vh);
    let o = ops::matmul(&a_q, &kv, meter.as_deref_mut())?;
    release(&mut meter, a_q);
    release(&mut meter, kv);
    finish_heads(o, &mut meter)
}

/// Interactive decomposed attention (iMHSA) on a token grid `z: [N, c]`.
///
/// Computes `A_Q·(A_K·V)` per head; no `N×N` tensor is ever allocated.
pub fn imhsa_forward<T: Scalar>(
    z: &Tensor<T>,
    w: &QkvWeights<T>,
    mix: &HeadMixWeights<T>,
    cfg: &AttnConfig,
    meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    linear_attention("imhsa_forward", z, w, Some(mix), cfg, meter)
}

/// Decomposed attention without cross-head interaction.
pub fn decomposed_forward<T: Scalar>(
    z: &Tensor<T>,
    w: &QkvWeights<T>,
    cfg: &AttnConfig,
    meter: Option<&mut Meter>,
) -> Result<Tensor<T>> {
    linear_attention("decomposed_forward", z, w, None, cfg, meter)
}

/// Test oracle for [`imhsa_forward`]: materializes `A = A_Q·A_K` per head and
/// multiplies by `V` afterwards. `mix = None` gives the plain decomposed
/// attention.
pub fn dense_oracle_imhsa<T: Scalar>(
    z: &Tensor<T>,
    w: &QkvWeights<T>,
    mix: Option<&HeadMixWeights<T>>,
    cfg: &AttnConfig,
) -> Result<Tensor<T>> {
    const OP: &str = "dense_oracle_imhsa";
    if cfg.num_tokens() > DENSE_ORACLE_MAX_TOKENS {
        return Err(Error::invalid(
            OP,
            format!("{} tokens exceed the dense limit {DENSE_ORACLE_MAX_TOKENS}", cfg.num_tokens()),
        ));
    }
    let (attn, vh) = factors_and_values(OP, z, w, mix, cfg, &mut None)?;
    let dense = attn.dense()?;
    let o = ops::matmul(&dense, &vh, None)?;
    merge_heads(&o, None)
}
