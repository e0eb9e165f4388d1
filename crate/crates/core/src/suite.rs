//! Central-difference gradient checks over every recorded op, the four
//! attention variants and a small end-to-end model.

use crate::attention::{AttentionKind, AttnConfig};
use crate::autodiff::{attention, grad_check_with, AttnVars, GradCheckOptions, GradReport, Tape, Var};
use crate::data::{Rng, SynthTask};
use crate::error::Result;
use crate::model::{build_toy_ivit, forward_vars, StageSpec, ToyIViTConfig};
use crate::tensor::Tensor;

/// One named check and its report.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradReport,
}

type Loss = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync;
type OpCase = (&'static str, Vec<Tensor<f64>>, Box<Loss>);
type ModelCase = (Vec<String>, Vec<Tensor<f64>>, Box<Loss>);

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gaussian()).expect("positive extents")
}

/// `Σ w ⊙ y` with weights drawn from `seed`, so every output entry matters.
fn weighted(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y)?.shape().to_vec();
    let w = t.leaf(randn(&shape, &mut Rng::new(seed)));
    let p = t.mul(y, w)?;
    t.sum_all(p)
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// One random instance of every op check, drawn from `rng`.
fn op_cases(rng: &mut Rng) -> Vec<OpCase> {
    let (b, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
    let ws = rng.next_u64();
    let mut cases: Vec<OpCase> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($p:expr),*], |$t:ident, $v:ident| $body:expr) => {
            cases.push(($name, vec![$($p),*], Box::new(move |$t: &mut Tape<f64>, $v: &[Var]| {
                let y = $body?;
                weighted($t, y, ws)
            })));
        };
    }
    case!("matmul", [randn(&[b, m, k], rng), randn(&[b, k, n], rng)], |t, v| t.matmul(v[0], v[1]));
    case!("matmul_shared", [randn(&[b, m, k], rng), randn(&[k, n], rng)], |t, v| t.matmul(v[0], v[1]));
    case!("matmul_bt", [randn(&[b, m, k], rng), randn(&[n, k], rng)], |t, v| t.matmul_bt(v[0], v[1]));
    case!("transpose", [randn(&[b, m, k], rng)], |t, v| t.transpose_last2(v[0]));
    case!("reshape", [randn(&[b, m, k], rng)], |t, v| t.reshape(v[0], &[b * m * k]));
    case!("softmax", [randn(&[m, k], rng)], |t, v| t.softmax_lastdim(v[0]));
    // two channels normalise to exactly ±1 and leave no gradient
    let ln = dim(rng, 3, 6);
    case!("layernorm", [randn(&[m, ln], rng), randn(&[ln], rng), randn(&[ln], rng)], |t, v| t
        .layernorm(v[0], v[1], v[2], 1e-5));
    let c = dim(rng, 2, 6);
    case!("gelu", [randn(&[m, k], rng)], |t, v| t.gelu(v[0]));
    case!("add", [randn(&[m, k], rng), randn(&[m, k], rng)], |t, v| t.add(v[0], v[1]));
    case!("sub", [randn(&[m, k], rng), randn(&[m, k], rng)], |t, v| t.sub(v[0], v[1]));
    case!("mul", [randn(&[m, k], rng), randn(&[m, k], rng)], |t, v| t.mul(v[0], v[1]));
    case!("add_bias", [randn(&[m, k], rng), randn(&[k], rng)], |t, v| t.add_bias(v[0], v[1]));
    let s = rng.gaussian();
    case!("scale", [randn(&[m, k], rng)], |t, v| t.scale(v[0], s));
    case!("concat", [randn(&[m, k], rng), randn(&[m, n], rng)], |t, v| t.concat_lastdim(&[v[0], v[1]]));
    let (gh, gw) = (dim(rng, 1, 5), dim(rng, 1, 5));
    let (oh, ow) = (dim(rng, 1, gh), dim(rng, 1, gw));
    case!("adaptive_pool", [randn(&[b, gh, gw, c], rng)], |t, v| t.adaptive_avg_pool2d(v[0], oh, ow));
    case!("avg_pool3x3", [randn(&[b, gh, gw, c], rng)], |t, v| t.avg_pool3x3(v[0]));
    let h = dim(rng, 1, 3);
    case!("split_heads", [randn(&[b, m, h * c], rng)], |t, v| t.split_heads(v[0], h));
    case!("merge_heads", [randn(&[b, h, m, c], rng)], |t, v| t.merge_heads(v[0]));
    case!("head_mix", [randn(&[b, h, m, k], rng), randn(&[h, h], rng)], |t, v| t.head_mix(v[0], v[1]));
    cases.push(("mean_all", vec![randn(&[m, k], rng)], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mean_all(v[0]))));
    let labels: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
    cases.push((
        "cross_entropy",
        vec![randn(&[m, k], rng)],
        Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.cross_entropy(v[0], &labels)),
    ));
    cases
}

/// One attention layer read out through random weights. A linear readout
/// keeps the loss small, so finite-difference roundoff stays well below
/// the smallest gradient entries.
fn attention_case(kind: AttentionKind, rng: &mut Rng) -> (Vec<Tensor<f64>>, Box<Loss>) {
    let (h, d) = (dim(rng, 1, 3), dim(rng, 1, 3));
    let (gh, gw) = (dim(rng, 2, 4), dim(rng, 2, 4));
    let cfg = AttnConfig::new(h, d, (gh, gw), (dim(rng, 1, gh), dim(rng, 1, gw))).expect("valid shape");
    let c = h * d;
    let n = gh * gw;
    let mut params = vec![randn(&[n, c], rng)];
    // unit-variance logits; saturated softmaxes have vanishing gradients
    for _ in 0..3 {
        let scale = (c as f64).sqrt().recip();
        params.push(Tensor::from_fn([c, c], |_| scale * rng.gaussian()).unwrap());
    }
    for _ in 0..4 {
        let noise = randn(&[h, h], rng);
        params.push(Tensor::from_fn([h, h], |i| (if i / h == i % h { 1.0 } else { 0.0 }) + 0.3 * noise.data()[i]).unwrap());
    }
    let ws = rng.next_u64();
    let loss = move |t: &mut Tape<f64>, v: &[Var]| {
        let vars = AttnVars { w_q: v[1], w_k: v[2], w_v: v[3], mix: Some([v[4], v[5], v[6], v[7]]) };
        let tr = attention(t, v[0], &vars, kind, &cfg)?;
        weighted(t, tr.out, ws)
    };
    (params, Box::new(loss))
}

/// Small model with every block type, a downsampling step and all
/// parameter kinds. Wider initialisation keeps gradients well above the
/// finite-difference noise floor.
pub fn tiny_model_config(kind: AttentionKind) -> ToyIViTConfig {
    ToyIViTConfig {
        image: (4, 4),
        in_channels: 3,
        patch_size: 1,
        stages: vec![StageSpec::pool(1, 4), StageSpec::attention(kind, 1, 4, 2), StageSpec::attention(kind, 1, 6, 2)],
        mlp_ratio: 2.0,
        landmark_grid: (2, 2),
        num_classes: 3,
        init_std: 0.5,
        mix_std: 0.3,
        ..ToyIViTConfig::default()
    }
}

fn model_case(kind: AttentionKind, seed: u64) -> Result<ModelCase> {
    let cfg = tiny_model_config(kind);
    let params = build_toy_ivit::<f64>(&cfg, seed)?;
    let names: Vec<String> = params.names().cloned().collect();
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let synth = SynthTask { grid: (4, 4), token_dim: 3, classes: 3, noise: 0.5 };
    let (x, labels) = synth.gen_synth_batch::<f64>(&mut Rng::new(seed), 2)?;
    let names_c = names.clone();
    let loss = move |t: &mut Tape<f64>, v: &[Var]| {
        let vars = names_c.iter().cloned().zip(v.iter().copied()).collect();
        let f = forward_vars(&cfg, vars, &x, t)?;
        t.cross_entropy(f.logits, &labels)
    };
    Ok((names, tensors, Box::new(loss)))
}

/// Runs the whole suite: `instances` random draws of every op check, every
/// attention variant and the end-to-end model for each variant.
pub fn gradient_suite(opts: &GradCheckOptions, instances: usize) -> Result<Vec<SuiteEntry>> {
    let mut out: Vec<SuiteEntry> = Vec::new();
    let mut merge = |name: String, report: GradReport| match out.iter_mut().find(|e| e.name == name) {
        Some(e) => e.report.params.extend(report.params),
        None => out.push(SuiteEntry { name, report }),
    };
    let mut rng = Rng::new(opts.seed);
    for _ in 0..instances.max(1) {
        for (name, params, loss) in op_cases(&mut rng) {
            merge(name.to_string(), grad_check_with(loss, &params, opts)?);
        }
        for kind in AttentionKind::ALL {
            let (params, loss) = attention_case(kind, &mut rng);
            merge(format!("attention_{kind}"), grad_check_with(loss, &params, opts)?);
        }
    }
    for kind in AttentionKind::ALL {
        let (_, params, loss) = model_case(kind, opts.seed)?;
        merge(format!("model_{kind}"), grad_check_with(loss, &params, opts)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_one_draw() {
        let opts = GradCheckOptions::default();
        let suite = gradient_suite(&opts, 1).unwrap();
        assert_eq!(suite.len(), 21 + 2 * AttentionKind::ALL.len());
        for e in &suite {
            assert!(e.report.passed(), "{}: {:?}", e.name, e.report.params.iter().filter(|p| p.max_rel_error > 1e-4).collect::<Vec<_>>());
        }
    }

    #[test]
    fn model_gradients_reach_every_parameter() {
        let (names, params, loss) = model_case(AttentionKind::Interactive, 1).unwrap();
        let mut t = Tape::new();
        let v: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let l = loss(&mut t, &v).unwrap();
        let g = t.backward(l).unwrap();
        for (n, &var) in names.iter().zip(&v) {
            assert!(g.wrt(var).unwrap().data().iter().any(|x| *x != 0.0), "{n} has zero gradient");
        }
    }
}
