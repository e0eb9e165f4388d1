use indexmap::IndexMap;

use super::config::{Mixer, ToyIViTConfig};
use super::params::ModelParams;
use crate::attention::AttentionKind;
use crate::autodiff::{attention, AttnVars, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Attention maps recorded for one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnRecord {
    pub stage: usize,
    pub block: usize,
    pub kind: AttentionKind,
    /// `(A_Q, A_K)` for decomposed variants, `(A, A)` for quadratic ones.
    pub maps: (Var, Var),
}

/// Handles produced by [`forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, num_classes]`
    pub logits: Var,
    pub params: IndexMap<String, Var>,
    pub attention: Vec<AttnRecord>,
}

/// Cuts `[B, H, W, C]` into non-overlapping `p×p` patches, giving
/// `[B, (H/p)·(W/p), p·p·C]` with each patch flattened as (row, col, channel).
pub fn patchify<T: Scalar>(input: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::shape("patchify", format!("expected [B, H, W, C], got {:?}", input.shape())));
    }
    let [b, h, w, c] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("patchify", format!("{h}×{w} not divisible by patch {p}")));
    }
    if p == 1 {
        return input.clone().into_shape([b, h * w, c]);
    }
    let (gh, gw) = (h / p, w / p);
    let src = input.data();
    let mut out = Vec::with_capacity(input.len());
    for bi in 0..b {
        for i in 0..gh {
            for j in 0..gw {
                for r in 0..p {
                    let row = ((bi * h + i * p + r) * w + j * p) * c;
                    out.extend_from_slice(&src[row..row + p * c]);
                }
            }
        }
    }
    Tensor::new([b, gh * gw, p * p * c], out)
}

/// Normalises an input batch to `[B, H, W, C]`; `[B, H·W, C]` is also accepted.
fn as_image<T: Scalar>(cfg: &ToyIViTConfig, input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = cfg.image;
    let ok4 = input.rank() == 4 && input.shape()[1..] == [h, w, cfg.in_channels];
    let ok3 = input.rank() == 3 && input.shape()[1..] == [h * w, cfg.in_channels];
    if ok4 {
        Ok(input.clone())
    } else if ok3 {
        input.clone().into_shape([input.shape()[0], h, w, cfg.in_channels])
    } else {
        Err(Error::shape(
            "forward",
            format!("input {:?}, expected [B, {h}, {w}, {c}] or [B, {n}, {c}]", input.shape(), c = cfg.in_channels, n = h * w),
        ))
    }
}

struct Builder<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    vars: IndexMap<String, Var>,
    eps: f64,
}

impl<T: Scalar> Builder<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("forward", format!("missing parameter `{name}`")))
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (w, b) = (self.p(&format!("{prefix}.weight"))?, self.p(&format!("{prefix}.bias"))?);
        let y = self.tape.matmul_bt(x, w)?;
        self.tape.add_bias(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (g, b) = (self.p(&format!("{prefix}.gamma"))?, self.p(&format!("{prefix}.beta"))?);
        self.tape.layernorm(x, g, b, self.eps)
    }

    /// `x: [B, N, c]` viewed as `[B, h, w, c]`, mean-pooled to `out`.
    fn pool_grid(&mut self, x: Var, grid: (usize, usize), out: (usize, usize)) -> Result<Var> {
        let s = self.tape.value(x)?.shape().to_vec();
        let g = self.tape.reshape(x, &[s[0], grid.0, grid.1, s[2]])?;
        let p = self.tape.adaptive_avg_pool2d(g, out.0, out.1)?;
        self.tape.reshape(p, &[s[0], out.0 * out.1, s[2]])
    }
}

/// Records the model on `tape` and returns the logits handle.
///
/// Blocks are pre-norm residual: `x += mixer(LN(x))`, then `x += MLP(LN(x))`.
pub fn forward<T: Scalar>(
    cfg: &ToyIViTConfig,
    params: &ModelParams<T>,
    input: &Tensor<T>,
    tape: &mut Tape<T>,
) -> Result<Forward> {
    let vars = params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
    forward_vars(cfg, vars, input, tape)
}

/// Same as [`forward`] with parameters already recorded on `tape`, keyed by
/// their layout names.
pub fn forward_vars<T: Scalar>(
    cfg: &ToyIViTConfig,
    vars: IndexMap<String, Var>,
    input: &Tensor<T>,
    tape: &mut Tape<T>,
) -> Result<Forward> {
    cfg.validate()?;
    let image = as_image(cfg, input)?;
    let batch = image.shape()[0];
    let patches = patchify(&image, cfg.patch_size)?;
    let mut b = Builder { tape, vars, eps: cfg.ln_eps };
    let mut records = Vec::new();

    let input = b.tape.leaf(patches);
    let mut x = b.linear(input, "patch_embed")?;
    let grids = cfg.stage_grids();
    let mut grid = grids[0];
    for (i, stage) in cfg.stages.iter().enumerate() {
        if cfg.downsamples(i) {
            x = b.pool_grid(x, grid, grids[i])?;
            x = b.linear(x, &format!("stage{i}.downsample"))?;
        }
        grid = grids[i];
        let attn_cfg = cfg.attn_config(i)?;
        for j in 0..stage.depth {
            let p = format!("stage{i}.block{j}");
            let y = b.norm(x, &format!("{p}.norm1"))?;
            let mixed = match (stage.mixer, &attn_cfg) {
                (Mixer::Pool, _) => {
                    let s = b.tape.value(y)?.shape().to_vec();
                    let g = b.tape.reshape(y, &[s[0], grid.0, grid.1, s[2]])?;
                    let pooled = b.tape.avg_pool3x3(g)?;
                    let d = b.tape.sub(pooled, g)?;
                    b.tape.reshape(d, &s)?
                }
                (Mixer::Attention(kind), Some(acfg)) => {
                    let mix = if kind.has_interaction() {
                        let m = |n: &str| b.p(&format!("{p}.attn.mix.{n}"));
                        // the quadratic variant has no key-side pair; its slots
                        // are never read
                        if kind.is_quadratic() {
                            Some([m("w1_q")?, m("w2_q")?, m("w1_q")?, m("w2_q")?])
                        } else {
                            Some([m("w1_q")?, m("w2_q")?, m("w1_k")?, m("w2_k")?])
                        }
                    } else {
                        None
                    };
                    let vars = AttnVars {
                        w_q: b.p(&format!("{p}.attn.w_q"))?,
                        w_k: b.p(&format!("{p}.attn.w_k"))?,
                        w_v: b.p(&format!("{p}.attn.w_v"))?,
                        mix,
                    };
                    let trace = attention(b.tape, y, &vars, kind, acfg)?;
                    records.push(AttnRecord { stage: i, block: j, kind, maps: trace.maps });
                    b.linear(trace.out, &format!("{p}.attn.proj"))?
                }
                (Mixer::Attention(_), None) => unreachable!("attention stages always have a config"),
            };
            x = b.tape.add(x, mixed)?;
            let y = b.norm(x, &format!("{p}.norm2"))?;
            let h = b.linear(y, &format!("{p}.mlp.fc1"))?;
            let h = b.tape.gelu(h)?;
            let h = b.linear(h, &format!("{p}.mlp.fc2"))?;
            x = b.tape.add(x, h)?;
        }
    }
    let pooled = b.pool_grid(x, grid, (1, 1))?;
    let c = cfg.stages.last().map_or(0, |s| s.channels);
    let pooled = b.tape.reshape(pooled, &[batch, c])?;
    let logits = b.linear(pooled, "head")?;
    Ok(Forward { logits, params: b.vars, attention: records })
}

/// Logits without keeping the tape.
pub fn predict<T: Scalar>(cfg: &ToyIViTConfig, params: &ModelParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let f = forward(cfg, params, input, &mut tape)?;
    Ok(tape.value(f.logits)?.clone())
}

/// FLOPs of one forward pass over `input`, shape-dependent only.
pub fn forward_flops<T: Scalar>(cfg: &ToyIViTConfig, params: &ModelParams<T>, input: &Tensor<T>) -> Result<u64> {
    let mut tape = Tape::with_meter();
    forward(cfg, params, input, &mut tape)?;
    Ok(tape.meter().map_or(0, |m| m.flops()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Rng, SynthTask};
    use crate::model::build_toy_ivit;

    #[test]
    fn patchify_layout() {
        let x = Tensor::<f64>::from_fn([1, 4, 4, 2], |i| i as f64).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 8]);
        // first patch: rows 0..2, cols 0..2, both channels
        assert_eq!(&p.data()[..8], &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(patchify(&x, 1).unwrap().shape(), &[1, 16, 2]);
        assert!(patchify(&x, 3).is_err());
    }

    #[test]
    fn logits_shape_and_batch_independence() {
        let cfg = ToyIViTConfig::default();
        let params = build_toy_ivit::<f64>(&cfg, 2).unwrap();
        let (x, _) = SynthTask::default().gen_synth_batch::<f64>(&mut Rng::new(1), 4).unwrap();
        let all = predict(&cfg, &params, &x).unwrap();
        assert_eq!(all.shape(), &[4, 4]);
        let one = Tensor::new([1, 8, 8, 16], x.data()[2 * 1024..3 * 1024].to_vec()).unwrap();
        let single = predict(&cfg, &params, &one).unwrap();
        for k in 0..4 {
            assert!((single.data()[k] - all.data()[8 + k]).abs() < 1e-12);
        }
        let flat = x.clone().into_shape([4, 64, 16]).unwrap();
        assert_eq!(predict(&cfg, &params, &flat).unwrap(), all);
        assert!(predict(&cfg, &params, &Tensor::zeros([4, 8, 8, 3]).unwrap()).is_err());
    }

    #[test]
    fn zero_input_gives_equal_logits() {
        let cfg = ToyIViTConfig::default();
        // zero biases keep the residual stream at exactly zero all the way
        let params = build_toy_ivit::<f64>(&cfg, 3).unwrap();
        let logits = predict(&cfg, &params, &Tensor::zeros([2, 8, 8, 16]).unwrap()).unwrap();
        assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
    }

    #[test]
    fn records_every_attention_block() {
        let cfg = ToyIViTConfig::default();
        let params = build_toy_ivit::<f32>(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let f = forward(&cfg, &params, &Tensor::zeros([2, 8, 8, 16]).unwrap(), &mut tape).unwrap();
        assert_eq!(f.attention.len(), 4);
        assert_eq!(tape.value(f.attention[0].maps.0).unwrap().shape(), &[2, 4, 16, 4]);
        assert_eq!(tape.value(f.attention[0].maps.1).unwrap().shape(), &[2, 4, 4, 16]);
    }
}
