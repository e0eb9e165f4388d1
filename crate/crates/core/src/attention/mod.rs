//! Attention variants: baseline MHSA, MHSA with cross-head interaction,
//! landmark-decomposed attention and interactive decomposed attention
//! (iMHSA), with head diagnostics and heatmap export.
//!
//! Conventions used throughout:
//!
//! * tokens are rows: `z` is `[N, c]` and projections are `Q = z·W_Qᵀ`;
//! * per-head stacks are `[H, N, d]`, head `h` owning channels
//!   `h·d..(h+1)·d`;
//! * the query-side factor `A_Q` is `[H, N, L]` (softmax over landmarks) and
//!   the key-side factor `A_K` is `[H, L, N]` (softmax over tokens), so the
//!   output is `A_Q·(A_K·V)` and no `N×N` matrix is formed;
//! * cross-head interaction mixes along the head axis with `H×H` matrices:
//!   `T'[i] = Σ_j W[i, j]·T[j]`.

mod diagnostics;
mod heatmap;
mod kernels;

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{ops, with_meter, Meter, Scalar, Tensor};

pub use diagnostics::{cross_head_similarity, head_variance};
pub use heatmap::{encode_pgm, export_attention_heatmap, normalize_to_bytes, read_pgm, PgmImage};
pub use kernels::{
    compute_landmarks, decomposed_attention, decomposed_forward, dense_oracle_imhsa, imhsa_forward,
    mhsa_forward, mhsa_interactive_forward, DENSE_ORACLE_MAX_TOKENS,
};

/// Landmark grid used when none is given: 7×7 = 49 landmarks.
pub const DEFAULT_LANDMARK_GRID: (usize, usize) = (7, 7);

/// The four attention variants, named as on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// Full softmax attention, `O(N²)`.
    Mhsa,
    /// Full attention with cross-head interaction, `O(N²)`.
    MhsaInteractive,
    /// Landmark decomposition without interaction, `O(N·L)`.
    Decomposed,
    /// Landmark decomposition with interaction on both factors, `O(N·L)`.
    Interactive,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] =
        [AttentionKind::Mhsa, AttentionKind::MhsaInteractive, AttentionKind::Decomposed, AttentionKind::Interactive];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Mhsa => "mhsa",
            AttentionKind::MhsaInteractive => "mhsa-ix",
            AttentionKind::Decomposed => "decomp",
            AttentionKind::Interactive => "imhsa",
        }
    }

    pub fn is_quadratic(self) -> bool {
        matches!(self, AttentionKind::Mhsa | AttentionKind::MhsaInteractive)
    }

    pub fn has_interaction(self) -> bool {
        matches!(self, AttentionKind::MhsaInteractive | AttentionKind::Interactive)
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("attention", format!("unknown variant `{s}` (mhsa, mhsa-ix, decomp, imhsa)")))
    }
}

/// Shape parameters of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    num_heads: usize,
    head_dim: usize,
    token_grid: (usize, usize),
    landmark_grid: (usize, usize),
}

impl AttnConfig {
    pub fn new(
        num_heads: usize,
        head_dim: usize,
        token_grid: (usize, usize),
        landmark_grid: (usize, usize),
    ) -> Result<Self> {
        const OP: &str = "AttnConfig";
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::invalid(OP, "heads and head_dim must be positive"));
        }
        let (hg, wg) = token_grid;
        let (lh, lw) = landmark_grid;
        if hg == 0 || wg == 0 || lh == 0 || lw == 0 {
            return Err(Error::invalid(OP, "grid extents must be positive"));
        }
        if lh > hg || lw > wg {
            return Err(Error::invalid(
                OP,
                format!("landmark grid {lh}x{lw} exceeds token grid {hg}x{wg}"),
            ));
        }
        Ok(AttnConfig { num_heads, head_dim, token_grid, landmark_grid })
    }

    /// Uses the requested landmark grid, clamped to the token grid.
    pub fn clamped(
        num_heads: usize,
        head_dim: usize,
        token_grid: (usize, usize),
        landmark_grid: (usize, usize),
    ) -> Result<Self> {
        let grid = (landmark_grid.0.min(token_grid.0), landmark_grid.1.min(token_grid.1));
        Self::new(num_heads, head_dim, token_grid, grid)
    }

    /// Square token grid of `n` tokens; errors if `n` is not a perfect square.
    pub fn square(num_heads: usize, head_dim: usize, n: usize, landmark_grid: (usize, usize)) -> Result<Self> {
        let side = square_side(n)
            .ok_or_else(|| Error::invalid("AttnConfig", format!("{n} tokens do not form a square grid")))?;
        Self::clamped(num_heads, head_dim, (side, side), landmark_grid)
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn channels(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn token_grid(&self) -> (usize, usize) {
        self.token_grid
    }

    pub fn landmark_grid(&self) -> (usize, usize) {
        self.landmark_grid
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid.0 * self.token_grid.1
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmark_grid.0 * self.landmark_grid.1
    }

    /// `d^(-1/2)`.
    pub fn scale(&self) -> f64 {
        (self.head_dim as f64).sqrt().recip()
    }

    pub(crate) fn check_tokens<T: Scalar>(&self, op: &'static str, z: &Tensor<T>) -> Result<()> {
        let want = [self.num_tokens(), self.channels()];
        if z.shape() != want {
            return Err(Error::shape(op, format!("tokens {:?}, config expects {want:?}", z.shape())));
        }
        Ok(())
    }
}

/// Integer square root when `n` is a perfect square.
pub fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n && n > 0).then_some(s)
}

/// Query, key and value projection matrices, each `[c, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvWeights<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

impl<T: Scalar> QkvWeights<T> {
    pub fn new(w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>) -> Result<Self> {
        let c = w_q.shape().first().copied().unwrap_or(0);
        for w in [&w_q, &w_k, &w_v] {
            if w.shape() != [c, c] {
                return Err(Error::shape("QkvWeights", format!("expected square [{c}, {c}], got {:?}", w.shape())));
            }
        }
        Ok(QkvWeights { w_q, w_k, w_v })
    }

    pub fn identity(c: usize) -> Result<Self> {
        Self::new(Tensor::eye(c)?, Tensor::eye(c)?, Tensor::eye(c)?)
    }

    /// Entries drawn from `N(0, std²)` in the order `W_Q`, `W_K`, `W_V`.
    pub fn random(c: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let mut draw = || Tensor::from_fn([c, c], |_| T::from_f64(std * rng.gaussian()));
        let (q, k, v) = (draw()?, draw()?, draw()?);
        Self::new(q, k, v)
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }
}

/// Cross-head interaction matrices, each `[H, H]`.
///
/// `w1_*` mixes scores before the softmax and `w2_*` mixes the normalized
/// maps after it. MHSA with interaction only uses the query pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMixWeights<T: Scalar> {
    pub w1_q: Tensor<T>,
    pub w2_q: Tensor<T>,
    pub w1_k: Tensor<T>,
    pub w2_k: Tensor<T>,
}

impl<T: Scalar> HeadMixWeights<T> {
    pub fn new(w1_q: Tensor<T>, w2_q: Tensor<T>, w1_k: Tensor<T>, w2_k: Tensor<T>) -> Result<Self> {
        let h = w1_q.shape().first().copied().unwrap_or(0);
        for w in [&w1_q, &w2_q, &w1_k, &w2_k] {
            if w.shape() != [h, h] {
                return Err(Error::shape("HeadMixWeights", format!("expected [{h}, {h}], got {:?}", w.shape())));
            }
        }
        Ok(HeadMixWeights { w1_q, w2_q, w1_k, w2_k })
    }

    pub fn identity(heads: usize) -> Result<Self> {
        Self::new(Tensor::eye(heads)?, Tensor::eye(heads)?, Tensor::eye(heads)?, Tensor::eye(heads)?)
    }

    /// Identity plus `N(0, std²)` noise, drawn in the order
    /// `w1_q`, `w2_q`, `w1_k`, `w2_k`.
    pub fn near_identity(heads: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let mut draw = || {
            Tensor::from_fn([heads, heads], |i| {
                let eye = if i / heads == i % heads { 1.0 } else { 0.0 };
                T::from_f64(eye + std * rng.gaussian())
            })
        };
        let (a, b, c, d) = (draw()?, draw()?, draw()?, draw()?);
        Self::new(a, b, c, d)
    }

    pub fn heads(&self) -> usize {
        self.w1_q.shape()[0]
    }
}

/// Query-side and key-side factors of a decomposed attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedAttn<T: Scalar> {
    /// `[H, N, L]`
    pub a_q: Tensor<T>,
    /// `[H, L, N]`
    pub a_k: Tensor<T>,
}

impl<T: Scalar> DecomposedAttn<T> {
    /// Materializes `A_Q·A_K` as `[H, N, N]`. Diagnostics and tests only.
    pub fn dense(&self) -> Result<Tensor<T>> {
        ops::matmul(&self.a_q, &self.a_k, None)
    }
}

// ── head layout ────────────────────────────────────────────────────────────

/// `[.., N, c]` → `[.., H, N, d]`.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize, mut meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape("split_heads", "needs rank >= 2"));
    }
    let c = x.last_dim();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::invalid("split_heads", format!("{c} channels not divisible by {heads} heads")));
    }
    let r = x.rank();
    let n = x.shape()[r - 2];
    let d = c / heads;
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, heads * n * d, |b, dst| {
        let s = &src[b * n * c..][..n * c];
        for h in 0..heads {
            for t in 0..n {
                dst[(h * n + t) * d..][..d].copy_from_slice(&s[t * c + h * d..][..d]);
            }
        }
    });
    let mut shape = x.shape()[..r - 2].to_vec();
    shape.extend([heads, n, d]);
    let out = Tensor::from_parts(shape, out);
    let bytes = out.size_bytes();
    with_meter(&mut meter, |m| m.alloc(bytes));
    Ok(out)
}

/// `[.., H, N, d]` → `[.., N, H·d]`; exact inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(x: &Tensor<T>, mut meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    if x.rank() < 3 {
        return Err(Error::shape("merge_heads", "needs rank >= 3"));
    }
    let r = x.rank();
    let (heads, n, d) = (x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]);
    let c = heads * d;
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, n * c, |b, dst| {
        let s = &src[b * n * c..][..n * c];
        for h in 0..heads {
            for t in 0..n {
                dst[t * c + h * d..][..d].copy_from_slice(&s[(h * n + t) * d..][..d]);
            }
        }
    });
    let mut shape = x.shape()[..r - 3].to_vec();
    shape.extend([n, c]);
    let out = Tensor::from_parts(shape, out);
    let bytes = out.size_bytes();
    with_meter(&mut meter, |m| m.alloc(bytes));
    Ok(out)
}

/// Mixes a `[.., H, R, C]` stack along the head axis: `T'[i] = Σ_j W[i, j]·T[j]`.
pub fn head_mix<T: Scalar>(stack: &Tensor<T>, w: &Tensor<T>, mut meter: Option<&mut Meter>) -> Result<Tensor<T>> {
    const OP: &str = "head_mix";
    if stack.rank() < 3 {
        return Err(Error::shape(OP, "stack needs rank >= 3"));
    }
    let r = stack.rank();
    let heads = stack.shape()[r - 3];
    if w.shape() != [heads, heads] {
        return Err(Error::shape(OP, format!("mix {:?} vs {heads} heads", w.shape())));
    }
    let plane = stack.shape()[r - 2] * stack.shape()[r - 1];
    let batch = stack.len() / (heads * plane);
    let (src, wd) = (stack.data(), w.data());
    let mut out = vec![T::zero(); stack.len()];
    par::for_each_chunk_mut(&mut out, heads * plane, |b, dst| {
        // SAFETY: `W` is heads×heads, the source block and `dst` are
        // heads×plane and do not alias.
        unsafe {
            T::gemm(
                heads,
                heads,
                plane,
                wd.as_ptr(),
                heads as isize,
                1,
                src.as_ptr().add(b * heads * plane),
                plane as isize,
                1,
                T::zero(),
                dst.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
    });
    let out = Tensor::from_parts(stack.shape().to_vec(), out);
    out.ensure_finite(OP)?;
    let (flops, bytes) = ((2 * heads * heads * plane * batch) as u64, out.size_bytes());
    with_meter(&mut meter, |m| {
        m.add_flops(flops);
        m.alloc(bytes);
    });
    Ok(out)
}

/// `Q, K, V = z·W_Qᵀ, z·W_Kᵀ, z·W_Vᵀ`.
pub fn project_qkv<T: Scalar>(
    z: &Tensor<T>,
    w: &QkvWeights<T>,
    mut meter: Option<&mut Meter>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if z.last_dim() != w.channels() {
        return Err(Error::shape(
            "project_qkv",
            format!("tokens {:?} vs weights [{c}, {c}]", z.shape(), c = w.channels()),
        ));
    }
    let q = ops::matmul_bt(z, &w.w_q, meter.as_deref_mut())?;
    let k = ops::matmul_bt(z, &w.w_k, meter.as_deref_mut())?;
    let v = ops::matmul_bt(z, &w.w_v, meter)?;
    Ok((q, k, v))
}
