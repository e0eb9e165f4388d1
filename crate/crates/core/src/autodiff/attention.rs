use super::{Tape, Var};
use crate::attention::{AttentionKind, AttnConfig};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Tape handles for one attention layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    /// `[w1_q, w2_q, w1_k, w2_k]`, required by the interactive variants.
    pub mix: Option<[Var; 4]>,
}

/// Output of a recorded attention layer and the maps it produced.
#[derive(Debug, Clone, Copy)]
pub struct AttnTrace {
    /// `[.., N, c]`
    pub out: Var,
    /// Quadratic variants: `(A, A)` with `A: [.., H, N, N]`.
    /// Decomposed variants: `(A_Q, A_K)`.
    pub maps: (Var, Var),
}

/// Records attention over `z: [.., N, c]` with any leading batch extents.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    vars: &AttnVars,
    kind: AttentionKind,
    cfg: &AttnConfig,
) -> Result<AttnTrace> {
    let shape = tape.value(z)?.shape().to_vec();
    let (n, c) = (cfg.num_tokens(), cfg.channels());
    if shape.len() < 2 || shape[shape.len() - 2..] != [n, c] {
        return Err(Error::shape("attention", format!("tokens {shape:?}, expected [.., {n}, {c}]")));
    }
    let mix = match (kind.has_interaction(), vars.mix) {
        (true, None) => return Err(Error::invalid("attention", format!("{kind} needs head-mix weights"))),
        (true, Some(m)) => Some(m),
        (false, _) => None,
    };
    let lead = &shape[..shape.len() - 2];
    let heads = cfg.num_heads();
    let q = tape.matmul_bt(z, vars.w_q)?;
    let k = tape.matmul_bt(z, vars.w_k)?;
    let v = tape.matmul_bt(z, vars.w_v)?;
    let vh = tape.split_heads(v, heads)?;

    if kind.is_quadratic() {
        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let a = factor(tape, qh, kh, mix.map(|m| (m[0], m[1])), cfg.scale())?;
        let o = tape.matmul(a, vh)?;
        let out = tape.merge_heads(o)?;
        return Ok(AttnTrace { out, maps: (a, a) });
    }

    let (hg, wg) = cfg.token_grid();
    let (lh, lw) = cfg.landmark_grid();
    let grid: Vec<usize> = lead.iter().copied().chain([hg, wg, c]).collect();
    let flat: Vec<usize> = lead.iter().copied().chain([cfg.num_landmarks(), c]).collect();
    let landmarks = |t: Var, tape: &mut Tape<T>| -> Result<Var> {
        let g = tape.reshape(t, &grid)?;
        let p = tape.adaptive_avg_pool2d(g, lh, lw)?;
        let p = tape.reshape(p, &flat)?;
        tape.split_heads(p, heads)
    };
    let ql = landmarks(q, tape)?;
    let kl = landmarks(k, tape)?;
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let a_q = factor(tape, qh, kl, mix.map(|m| (m[0], m[1])), cfg.scale())?;
    let a_k = factor(tape, ql, kh, mix.map(|m| (m[2], m[3])), cfg.scale())?;
    let kv = tape.matmul(a_k, vh)?;
    let o = tape.matmul(a_q, kv)?;
    let out = tape.merge_heads(o)?;
    Ok(AttnTrace { out, maps: (a_q, a_k) })
}

fn factor<T: Scalar>(
    tape: &mut Tape<T>,
    rows: Var,
    cols: Var,
    mix: Option<(Var, Var)>,
    scale: f64,
) -> Result<Var> {
    let raw = tape.matmul_bt(rows, cols)?;
    let raw = tape.scale(raw, scale)?;
    match mix {
        None => tape.softmax_lastdim(raw),
        Some((w1, w2)) => {
            let mixed = tape.head_mix(raw, w1)?;
            let soft = tape.softmax_lastdim(mixed)?;
            tape.head_mix(soft, w2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{
        decomposed_forward, imhsa_forward, mhsa_forward, mhsa_interactive_forward, HeadMixWeights, QkvWeights,
    };
    use crate::data::Rng;
    use crate::tensor::Tensor;

    fn setup(rng: &mut Rng) -> (AttnConfig, Tensor<f64>, QkvWeights<f64>, HeadMixWeights<f64>) {
        let cfg = AttnConfig::new(2, 3, (4, 5), (2, 3)).unwrap();
        let z = Tensor::from_fn([20, 6], |_| rng.gaussian()).unwrap();
        let w = QkvWeights::random(6, 0.4, rng).unwrap();
        let mix = HeadMixWeights::near_identity(2, 0.3, rng).unwrap();
        (cfg, z, w, mix)
    }

    #[test]
    fn recorded_attention_matches_kernels() {
        let mut rng = Rng::new(3);
        let (cfg, z, w, mix) = setup(&mut rng);
        for kind in AttentionKind::ALL {
            let mut tape = Tape::new();
            let zv = tape.leaf(z.clone());
            let vars = AttnVars {
                w_q: tape.leaf(w.w_q.clone()),
                w_k: tape.leaf(w.w_k.clone()),
                w_v: tape.leaf(w.w_v.clone()),
                mix: Some([
                    tape.leaf(mix.w1_q.clone()),
                    tape.leaf(mix.w2_q.clone()),
                    tape.leaf(mix.w1_k.clone()),
                    tape.leaf(mix.w2_k.clone()),
                ]),
            };
            let trace = attention(&mut tape, zv, &vars, kind, &cfg).unwrap();
            let want = match kind {
                AttentionKind::Mhsa => mhsa_forward(&z, &w, &cfg, None),
                AttentionKind::MhsaInteractive => mhsa_interactive_forward(&z, &w, &mix, &cfg, None),
                AttentionKind::Decomposed => decomposed_forward(&z, &w, &cfg, None),
                AttentionKind::Interactive => imhsa_forward(&z, &w, &mix, &cfg, None),
            }
            .unwrap();
            let got = tape.value(trace.out).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12, "{kind}");
        }
    }

    #[test]
    fn batched_attention_matches_per_item() {
        let mut rng = Rng::new(4);
        let (cfg, z, w, mix) = setup(&mut rng);
        let z2 = Tensor::from_fn([20, 6], |_| rng.gaussian()).unwrap();
        let mut both = z.data().to_vec();
        both.extend_from_slice(z2.data());
        let batch = Tensor::new([2, 20, 6], both).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(batch);
        let vars = AttnVars {
            w_q: tape.leaf(w.w_q.clone()),
            w_k: tape.leaf(w.w_k.clone()),
            w_v: tape.leaf(w.w_v.clone()),
            mix: Some([
                tape.leaf(mix.w1_q.clone()),
                tape.leaf(mix.w2_q.clone()),
                tape.leaf(mix.w1_k.clone()),
                tape.leaf(mix.w2_k.clone()),
            ]),
        };
        let trace = attention(&mut tape, zv, &vars, AttentionKind::Interactive, &cfg).unwrap();
        let got = tape.value(trace.out).unwrap().data().to_vec();
        let a = imhsa_forward(&z, &w, &mix, &cfg, None).unwrap();
        let b = imhsa_forward(&z2, &w, &mix, &cfg, None).unwrap();
        let want: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        let err = got.iter().zip(&want).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err < 1e-12);
    }

    #[test]
    fn interactive_without_mix_is_rejected() {
        let mut rng = Rng::new(5);
        let (cfg, z, w, _) = setup(&mut rng);
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let vars = AttnVars {
            w_q: tape.leaf(w.w_q.clone()),
            w_k: tape.leaf(w.w_k.clone()),
            w_v: tape.leaf(w.w_v.clone()),
            mix: None,
        };
        assert!(attention(&mut tape, zv, &vars, AttentionKind::Interactive, &cfg).is_err());
        assert!(attention(&mut tape, zv, &vars, AttentionKind::Decomposed, &cfg).is_ok());
    }
}
