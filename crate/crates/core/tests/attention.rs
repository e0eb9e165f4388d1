//! Attention kernels against a scalar-loop reference written from the
//! definitions, with no shared code beyond the input tensors.

use imhsa_core::attention::{
    decomposed_forward, dense_oracle_imhsa, imhsa_forward, mhsa_forward, mhsa_interactive_forward, AttnConfig,
    HeadMixWeights, QkvWeights,
};
use imhsa_core::data::Rng;
use imhsa_core::tensor::{Scalar, Tensor};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    let c = t.last_dim();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

/// `x·Wᵀ`
fn project(x: &Mat, w: &Mat) -> Mat {
    x.iter().map(|row| w.iter().map(|wr| row.iter().zip(wr).map(|(a, b)| a * b).sum()).collect()).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean over floor-bounded windows of a row-major `gh × gw` token grid.
fn pool(x: &Mat, (gh, gw): (usize, usize), (lh, lw): (usize, usize)) -> Mat {
    let c = x[0].len();
    let mut out = Vec::new();
    for i in 0..lh {
        for j in 0..lw {
            let (r0, r1) = (i * gh / lh, (i + 1) * gh / lh);
            let (c0, c1) = (j * gw / lw, (j + 1) * gw / lw);
            let mut acc = vec![0.0; c];
            for r in r0..r1 {
                for cc in c0..c1 {
                    acc.iter_mut().zip(&x[r * gw + cc]).for_each(|(a, v)| *a += v);
                }
            }
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            out.push(acc.into_iter().map(|a| a / count).collect());
        }
    }
    out
}

/// Per-head maps `softmax(mix1 ⊙ scores)` followed by `mix2 ⊙`, where
/// `scores[h][i][j] = s·⟨a_i, b_j⟩` over the channels of head `h`.
fn maps(a: &Mat, b: &Mat, heads: usize, mix: Option<(&Mat, &Mat)>) -> Vec<Mat> {
    let d = a[0].len() / heads;
    let s = 1.0 / (d as f64).sqrt();
    let scores: Vec<Mat> = (0..heads)
        .map(|h| {
            a.iter()
                .map(|ra| b.iter().map(|rb| s * (h * d..(h + 1) * d).map(|t| ra[t] * rb[t]).sum::<f64>()).collect())
                .collect()
        })
        .collect();
    let mixed = |w: &Mat, t: &[Mat]| -> Vec<Mat> {
        (0..heads)
            .map(|i| {
                (0..t[0].len())
                    .map(|r| (0..t[0][0].len()).map(|c| (0..heads).map(|j| w[i][j] * t[j][r][c]).sum()).collect())
                    .collect()
            })
            .collect()
    };
    let pre = match mix {
        Some((w1, _)) => mixed(w1, &scores),
        None => scores,
    };
    let soft: Vec<Mat> = pre.iter().map(|m| m.iter().map(|r| softmax(r)).collect()).collect();
    match mix {
        Some((_, w2)) => mixed(w2, &soft),
        None => soft,
    }
}

/// `out[n][h·d + t] = Σ_m A[h][n][m]·v[m][h·d + t]`
fn apply(attn: &[Mat], v: &Mat) -> Mat {
    let heads = attn.len();
    let d = v[0].len() / heads;
    (0..attn[0].len())
        .map(|n| {
            (0..heads * d)
                .map(|ch| {
                    let h = ch / d;
                    attn[h][n].iter().zip(v).map(|(a, vr)| a * vr[ch]).sum()
                })
                .collect()
        })
        .collect()
}

struct Case {
    cfg: AttnConfig,
    z: Tensor<f64>,
    w: QkvWeights<f64>,
    mix: HeadMixWeights<f64>,
}

fn case(seed: u64) -> Case {
    let mut rng = Rng::new(seed);
    let heads = [1, 2, 4][rng.below(3)];
    let d = [2, 4, 8][rng.below(3)];
    let (gh, gw) = (1 + rng.below(8), 1 + rng.below(8));
    let grid = (1 + rng.below(gh), 1 + rng.below(gw));
    let cfg = AttnConfig::new(heads, d, (gh, gw), grid).unwrap();
    let c = heads * d;
    let z = Tensor::from_fn([gh * gw, c], |_| rng.gaussian()).unwrap();
    let w = QkvWeights::random(c, 0.5, &mut rng).unwrap();
    let mix = HeadMixWeights::near_identity(heads, 0.3, &mut rng).unwrap();
    Case { cfg, z, w, mix }
}

struct Reference {
    mhsa: Mat,
    mhsa_ix: Mat,
    decomp: Mat,
    imhsa: Mat,
}

fn reference(c: &Case) -> Reference {
    let z = mat(&c.z);
    let (q, k, v) = (project(&z, &mat(&c.w.w_q)), project(&z, &mat(&c.w.w_k)), project(&z, &mat(&c.w.w_v)));
    let h = c.cfg.num_heads();
    let (ql, kl) = (pool(&q, c.cfg.token_grid(), c.cfg.landmark_grid()), pool(&k, c.cfg.token_grid(), c.cfg.landmark_grid()));
    let (w1q, w2q, w1k, w2k) = (mat(&c.mix.w1_q), mat(&c.mix.w2_q), mat(&c.mix.w1_k), mat(&c.mix.w2_k));
    let linear = |mq: Option<(&Mat, &Mat)>, mk: Option<(&Mat, &Mat)>| {
        let a_q = maps(&q, &kl, h, mq);
        let a_k = maps(&ql, &k, h, mk);
        // dense A = A_Q·A_K per head, then A·V
        let dense: Vec<Mat> = (0..h)
            .map(|i| {
                a_q[i]
                    .iter()
                    .map(|row| (0..k.len()).map(|m| row.iter().zip(&a_k[i]).map(|(x, ak)| x * ak[m]).sum()).collect())
                    .collect()
            })
            .collect();
        apply(&dense, &v)
    };
    Reference {
        mhsa: apply(&maps(&q, &k, h, None), &v),
        mhsa_ix: apply(&maps(&q, &k, h, Some((&w1q, &w2q))), &v),
        decomp: linear(None, None),
        imhsa: linear(Some((&w1q, &w2q)), Some((&w1k, &w2k))),
    }
}

fn max_rel(got: &Tensor<impl Scalar>, want: &Mat) -> f64 {
    let flat: Vec<f64> = want.iter().flatten().copied().collect();
    let scale = flat.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
    assert_eq!(got.len(), flat.len());
    got.to_f64_vec().iter().zip(&flat).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

#[test]
fn all_variants_match_scalar_loops_in_f64() {
    for seed in 0..40 {
        let c = case(seed);
        let r = reference(&c);
        let checks = [
            ("mhsa", max_rel(&mhsa_forward(&c.z, &c.w, &c.cfg, None).unwrap(), &r.mhsa)),
            ("mhsa-ix", max_rel(&mhsa_interactive_forward(&c.z, &c.w, &c.mix, &c.cfg, None).unwrap(), &r.mhsa_ix)),
            ("decomp", max_rel(&decomposed_forward(&c.z, &c.w, &c.cfg, None).unwrap(), &r.decomp)),
            ("imhsa", max_rel(&imhsa_forward(&c.z, &c.w, &c.mix, &c.cfg, None).unwrap(), &r.imhsa)),
            ("oracle", max_rel(&dense_oracle_imhsa(&c.z, &c.w, Some(&c.mix), &c.cfg).unwrap(), &r.imhsa)),
        ];
        for (name, err) in checks {
            assert!(err < 1e-12, "seed {seed} {name}: {err:e} ({:?})", c.cfg);
        }
    }
}

#[test]
fn single_precision_kernels_track_the_reference() {
    for seed in 100..120 {
        let c = case(seed);
        let r = reference(&c);
        let z = c.z.cast::<f32>();
        let w = QkvWeights::new(c.w.w_q.cast(), c.w.w_k.cast(), c.w.w_v.cast()).unwrap();
        let mix = HeadMixWeights::new(c.mix.w1_q.cast(), c.mix.w2_q.cast(), c.mix.w1_k.cast(), c.mix.w2_k.cast()).unwrap();
        assert!(max_rel(&imhsa_forward(&z, &w, &mix, &c.cfg, None).unwrap(), &r.imhsa) < 1e-5, "seed {seed}");
        assert!(max_rel(&mhsa_forward(&z, &w, &c.cfg, None).unwrap(), &r.mhsa) < 1e-5, "seed {seed}");
    }
}

#[test]
fn one_token_decomposition_equals_full_attention() {
    // A_Q·A_K is a product of two softmaxes; only with a single token are
    // both trivially 1 and the result coincides with MHSA
    let mut rng = Rng::new(3);
    let cfg = AttnConfig::new(2, 2, (1, 1), (1, 1)).unwrap();
    let z = Tensor::<f64>::from_fn([1, 4], |_| rng.gaussian()).unwrap();
    let w = QkvWeights::random(4, 1.0, &mut rng).unwrap();
    let a = mhsa_forward(&z, &w, &cfg, None).unwrap();
    let b = decomposed_forward(&z, &w, &cfg, None).unwrap();
    assert!(a.max_rel_diff(&b) < 1e-15);
}

#[test]
fn shape_errors_are_reported() {
    let c = case(1);
    let bad = Tensor::<f64>::zeros([c.cfg.num_tokens() + 1, c.cfg.channels()]).unwrap();
    assert!(imhsa_forward(&bad, &c.w, &c.mix, &c.cfg, None).is_err());
    assert!(mhsa_forward(&bad, &c.w, &c.cfg, None).is_err());
    let wrong_heads = HeadMixWeights::<f64>::identity(c.cfg.num_heads() + 1).unwrap();
    assert!(imhsa_forward(&c.z, &c.w, &wrong_heads, &c.cfg, None).is_err());
    assert!(AttnConfig::new(2, 2, (3, 3), (4, 1)).is_err());
}
