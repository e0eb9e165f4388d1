use proptest::prelude::*;

use imhsa_core::attention::{
    compute_landmarks, cross_head_similarity, decomposed_attention, decomposed_forward, dense_oracle_imhsa,
    head_variance, imhsa_forward, mhsa_forward, mhsa_interactive_forward, project_qkv, AttnConfig, HeadMixWeights,
    QkvWeights,
};
use imhsa_core::data::{parse_config, serialize_config, Rng};
use imhsa_core::tensor::{ops, Meter, Tensor};

fn randn(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| scale * rng.gaussian()).unwrap()
}

/// Heads, head width, token grid and landmark grid within the tested ranges.
fn attn_shape() -> impl Strategy<Value = AttnConfig> {
    (prop::sample::select(vec![1usize, 2, 4]), prop::sample::select(vec![2usize, 4, 8]), 2usize..=16, 2usize..=16)
        .prop_flat_map(|(h, d, gh, gw)| (Just((h, d, gh, gw)), 1..=gh, 1..=gw))
        .prop_filter("N in 4..=256", |((_, _, gh, gw), _, _)| (4..=256).contains(&(gh * gw)))
        .prop_map(|((h, d, gh, gw), lh, lw)| AttnConfig::new(h, d, (gh, gw), (lh, lw)).unwrap())
}

fn inputs(cfg: &AttnConfig, seed: u64) -> (Tensor<f64>, QkvWeights<f64>, HeadMixWeights<f64>) {
    let mut rng = Rng::new(seed);
    let c = cfg.channels();
    let z = Tensor::from_fn([cfg.num_tokens(), c], |_| rng.gaussian()).unwrap();
    let w = QkvWeights::random(c, 0.5, &mut rng).unwrap();
    let mix = HeadMixWeights::near_identity(cfg.num_heads(), 0.3, &mut rng).unwrap();
    (z, w, mix)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn op_shapes_depend_only_on_input_shapes(m in 1usize..6, k in 1usize..6, n in 1usize..6, s1: u64, s2: u64) {
        let (a1, a2) = (randn(&[m, k], s1, 1.0), randn(&[m, k], s2, 3.0));
        let b = randn(&[k, n], s2, 1.0);
        prop_assert_eq!(ops::matmul(&a1, &b, None).unwrap().shape().to_vec(), vec![m, n]);
        prop_assert_eq!(ops::matmul(&a2, &b, None).unwrap().shape().to_vec(), vec![m, n]);
        prop_assert_eq!(ops::softmax_lastdim(&a1, None).unwrap().shape().to_vec(), a2.shape().to_vec());
        prop_assert_eq!(ops::transpose_last2(&a1, None).unwrap().shape().to_vec(), vec![k, m]);
        let grid = randn(&[m, k, n], s1, 1.0);
        prop_assert_eq!(ops::adaptive_avg_pool2d(&grid, 1, 1, None).unwrap().shape().to_vec(), vec![1, 1, n]);
        prop_assert_eq!(ops::avg_pool3x3(&grid, None).unwrap().shape().to_vec(), grid.shape().to_vec());
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitude(rows in 1usize..5, cols in 1usize..40, seed: u64) {
        let x = randn(&[rows, cols], seed, 1e4);
        let y = ops::softmax_lastdim(&x, None).unwrap();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let y32 = ops::softmax_lastdim(&x.cast::<f32>(), None).unwrap();
        for r in y32.data().chunks(cols) {
            prop_assert!((r.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn even_pooling_keeps_the_mean(oh in 1usize..5, ow in 1usize..5, fh in 1usize..4, fw in 1usize..4, d in 1usize..4, seed: u64) {
        let x = randn(&[oh * fh, ow * fw, d], seed, 1.0);
        let p = ops::adaptive_avg_pool2d(&x, oh, ow, None).unwrap();
        prop_assert!((ops::mean_all(&x) - ops::mean_all(&p)).abs() < 1e-12);
    }

    #[test]
    fn ops_are_bitwise_deterministic(m in 1usize..8, k in 1usize..8, seed: u64) {
        let a = randn(&[m, k], seed, 1.0);
        let b = randn(&[k, m], seed ^ 1, 1.0);
        prop_assert_eq!(ops::matmul(&a, &b, None).unwrap(), ops::matmul(&a, &b, None).unwrap());
        prop_assert_eq!(ops::softmax_lastdim(&a, None).unwrap(), ops::softmax_lastdim(&a, None).unwrap());
        prop_assert_eq!(ops::gelu(&a, None).unwrap(), ops::gelu(&a, None).unwrap());
    }

    #[test]
    fn meter_counts_matmul_and_tracks_peak(m in 1usize..9, k in 1usize..9, n in 1usize..9) {
        let mut meter = Meter::new();
        let a = randn(&[m, k], 1, 1.0);
        let b = randn(&[k, n], 2, 1.0);
        let y = ops::matmul(&a, &b, Some(&mut meter)).unwrap();
        prop_assert_eq!(meter.flops(), (2 * m * k * n) as u64);
        let (f0, b0) = (meter.flops(), meter.bytes_allocated());
        ops::softmax_lastdim(&y, Some(&mut meter)).unwrap();
        prop_assert!(meter.flops() >= f0 && meter.bytes_allocated() >= b0);
        prop_assert!(meter.peak_bytes() >= meter.largest_alloc());
    }

    #[test]
    fn imhsa_matches_dense_oracle(cfg in attn_shape(), seed: u64) {
        let (z, w, mix) = inputs(&cfg, seed);
        let fast = imhsa_forward(&z, &w, &mix, &cfg, None).unwrap();
        let dense = dense_oracle_imhsa(&z, &w, Some(&mix), &cfg).unwrap();
        prop_assert!(fast.max_rel_diff(&dense) <= 1e-10);
        let (z32, w32, m32) = (
            z.cast::<f32>(),
            QkvWeights::new(w.w_q.cast(), w.w_k.cast(), w.w_v.cast()).unwrap(),
            HeadMixWeights::new(mix.w1_q.cast(), mix.w2_q.cast(), mix.w1_k.cast(), mix.w2_k.cast()).unwrap(),
        );
        let fast32 = imhsa_forward(&z32, &w32, &m32, &cfg, None).unwrap();
        let dense32 = dense_oracle_imhsa(&z32, &w32, Some(&m32), &cfg).unwrap();
        prop_assert!(fast32.max_rel_diff(&dense32) <= 1e-5);
    }

    #[test]
    fn identity_mixes_remove_interaction(cfg in attn_shape(), seed: u64) {
        let (z, w, _) = inputs(&cfg, seed);
        let eye = HeadMixWeights::identity(cfg.num_heads()).unwrap();
        let a = imhsa_forward(&z, &w, &eye, &cfg, None).unwrap();
        let b = decomposed_forward(&z, &w, &cfg, None).unwrap();
        prop_assert!(a.max_rel_diff(&b) <= 1e-6);
        let a = mhsa_interactive_forward(&z, &w, &eye, &cfg, None).unwrap();
        let b = mhsa_forward(&z, &w, &cfg, None).unwrap();
        prop_assert!(a.max_rel_diff(&b) <= 1e-6);
    }

    #[test]
    fn row_sums_follow_the_post_softmax_mix(cfg in attn_shape(), seed: u64) {
        let (z, w, mix) = inputs(&cfg, seed);
        let (hg, wg) = cfg.token_grid();
        let c = cfg.channels();
        let (q, k, _) = project_qkv(&z, &w, None).unwrap();
        let (ql, kl) = compute_landmarks(
            &q.clone().into_shape([hg, wg, c]).unwrap(),
            &k.clone().into_shape([hg, wg, c]).unwrap(),
            &cfg,
            None,
        ).unwrap();
        let h = cfg.num_heads();
        let plain = decomposed_attention(&q, &k, &ql, &kl, &cfg, None, None).unwrap();
        for t in [&plain.a_q, &plain.a_k] {
            for r in t.data().chunks(t.last_dim()) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let mixed = decomposed_attention(&q, &k, &ql, &kl, &cfg, Some(&mix), None).unwrap();
        for (t, w2) in [(&mixed.a_q, &mix.w2_q), (&mixed.a_k, &mix.w2_k)] {
            let per_head = t.len() / h;
            for (i, head) in t.data().chunks(per_head).enumerate() {
                let want: f64 = w2.data()[i * h..(i + 1) * h].iter().sum();
                for r in head.chunks(t.last_dim()) {
                    prop_assert!((r.iter().sum::<f64>() - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn imhsa_never_allocates_token_by_token(cfg in attn_shape(), seed: u64) {
        prop_assume!(cfg.num_landmarks() < cfg.num_tokens());
        let (z, w, mix) = inputs(&cfg, seed);
        let mut meter = Meter::new();
        imhsa_forward(&z, &w, &mix, &cfg, Some(&mut meter)).unwrap();
        let (n, l, c, h) = (cfg.num_tokens(), cfg.num_landmarks(), cfg.channels(), cfg.num_heads());
        let expected = (h * n * l).max(n * c).max(l * c) as u64 * 8;
        prop_assert_eq!(meter.largest_alloc(), expected);
        // an [H, N, N] stack would be the largest tensor unless c >= H·N
        if c < h * n {
            prop_assert!(meter.largest_alloc() < (h * n * n * 8) as u64);
        }
    }

    #[test]
    fn mhsa_is_token_permutation_equivariant(cfg in attn_shape(), seed: u64, shift in 1usize..255) {
        let (z, w, _) = inputs(&cfg, seed);
        let (n, c) = (cfg.num_tokens(), cfg.channels());
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permute = |t: &Tensor<f64>| {
            Tensor::from_fn([n, c], |i| t.data()[perm[i / c] * c + i % c]).unwrap()
        };
        let a = permute(&mhsa_forward(&z, &w, &cfg, None).unwrap());
        let b = mhsa_forward(&permute(&z), &w, &cfg, None).unwrap();
        prop_assert!(a.max_rel_diff(&b) < 1e-12);
    }

    #[test]
    fn head_diagnostics_are_bounded(h in 2usize..5, r in 1usize..5, cc in 1usize..5, seed: u64) {
        let stack = randn(&[h, r, cc], seed, 1.0);
        prop_assert!(head_variance(&stack).unwrap() >= 0.0);
        let s = cross_head_similarity(&stack).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
    }

    #[test]
    fn config_serialization_is_idempotent(entries in prop::collection::vec(("[a-z_]{1,8}", "[A-Za-z0-9.]{1,8}"), 0..6)) {
        let mut text = String::new();
        let mut keys: Vec<String> = Vec::new();
        for (k, v) in &entries {
            if !keys.contains(k) {
                text.push_str(&format!("  {k}={v}   # note\n"));
                keys.push(k.clone());
            }
        }
        let allowed: Vec<&str> = keys.iter().map(String::as_str).collect();
        let once = serialize_config(&parse_config(&text, &allowed).unwrap());
        let twice = serialize_config(&parse_config(&once, &allowed).unwrap());
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn decomposition_is_not_token_permutation_equivariant() {
    // landmarks pool spatial neighbourhoods, so a token shuffle changes them
    let cfg = AttnConfig::new(2, 2, (4, 4), (2, 2)).unwrap();
    let (z, w, _) = inputs(&cfg, 5);
    let (n, c) = (cfg.num_tokens(), cfg.channels());
    let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
    let permute = |t: &Tensor<f64>| Tensor::from_fn([n, c], |i| t.data()[perm[i / c] * c + i % c]).unwrap();
    let a = permute(&decomposed_forward(&z, &w, &cfg, None).unwrap());
    let b = decomposed_forward(&permute(&z), &w, &cfg, None).unwrap();
    assert!(a.max_rel_diff(&b) > 1e-3);
}
