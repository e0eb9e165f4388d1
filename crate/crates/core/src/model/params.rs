use indexmap::IndexMap;

use super::config::{Mixer, ToyIViTConfig};
use crate::data::Rng;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
    /// Identity plus small noise, for head mixes.
    NearIdentity,
}

/// Parameter names, shapes and initialisers in canonical order.
pub(crate) fn layout(cfg: &ToyIViTConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    let c0 = cfg.stages[0].channels;
    push("patch_embed.weight".into(), vec![c0, cfg.patch_dim()], Init::Normal);
    push("patch_embed.bias".into(), vec![c0], Init::Zeros);
    for (i, s) in cfg.stages.iter().enumerate() {
        let c = s.channels;
        if cfg.downsamples(i) {
            let prev = cfg.stages[i - 1].channels;
            push(format!("stage{i}.downsample.weight"), vec![c, prev], Init::Normal);
            push(format!("stage{i}.downsample.bias"), vec![c], Init::Zeros);
        }
        for j in 0..s.depth {
            let p = format!("stage{i}.block{j}");
            push(format!("{p}.norm1.gamma"), vec![c], Init::Ones);
            push(format!("{p}.norm1.beta"), vec![c], Init::Zeros);
            if let Mixer::Attention(kind) = s.mixer {
                for w in ["w_q", "w_k", "w_v"] {
                    push(format!("{p}.attn.{w}"), vec![c, c], Init::Normal);
                }
                let mixes: &[&str] = match kind {
                    k if !k.has_interaction() => &[],
                    k if k.is_quadratic() => &["w1_q", "w2_q"],
                    _ => &["w1_q", "w2_q", "w1_k", "w2_k"],
                };
                for m in mixes {
                    push(format!("{p}.attn.mix.{m}"), vec![s.heads, s.heads], Init::NearIdentity);
                }
                push(format!("{p}.attn.proj.weight"), vec![c, c], Init::Normal);
                push(format!("{p}.attn.proj.bias"), vec![c], Init::Zeros);
            }
            let hid = cfg.hidden(c);
            push(format!("{p}.norm2.gamma"), vec![c], Init::Ones);
            push(format!("{p}.norm2.beta"), vec![c], Init::Zeros);
            push(format!("{p}.mlp.fc1.weight"), vec![hid, c], Init::Normal);
            push(format!("{p}.mlp.fc1.bias"), vec![hid], Init::Zeros);
            push(format!("{p}.mlp.fc2.weight"), vec![c, hid], Init::Normal);
            push(format!("{p}.mlp.fc2.bias"), vec![c], Init::Zeros);
        }
    }
    let last = cfg.stages.last().map_or(0, |s| s.channels);
    push("head.weight".into(), vec![cfg.num_classes, last], Init::Normal);
    push("head.bias".into(), vec![cfg.num_classes], Init::Zeros);
    out
}

/// Named parameter tensors of a toy model, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Wraps `tensors` after checking names and shapes against `cfg`.
    pub fn from_map(cfg: &ToyIViTConfig, tensors: IndexMap<String, Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let want = layout(cfg);
        if want.len() != tensors.len() {
            return Err(Error::invalid(
                "ModelParams",
                format!("expected {} tensors, got {}", want.len(), tensors.len()),
            ));
        }
        let mut ordered = IndexMap::with_capacity(want.len());
        for (name, shape, _) in want {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::invalid("ModelParams", format!("missing `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::shape("ModelParams", format!("`{name}` is {:?}, expected {shape:?}", t.shape())));
            }
            ordered.insert(name, t.clone());
        }
        Ok(ModelParams { tensors: ordered })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("ModelParams", format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn as_map(&self) -> &IndexMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Deterministic initialisation: parameter `i` draws from `Rng::stream(seed, i)`.
/// Weights are `N(0, init_std²)`, norms start at gamma = 1 and beta = 0, biases
/// at 0 and head mixes at identity plus `N(0, mix_std²)`.
pub fn build_toy_ivit<T: Scalar>(cfg: &ToyIViTConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut tensors = IndexMap::new();
    for (i, (name, shape, init)) in layout(cfg).into_iter().enumerate() {
        let mut rng = Rng::stream(seed, i as u64);
        let cols = *shape.last().expect("parameters have rank >= 1");
        let t = match init {
            Init::Zeros => Tensor::zeros(shape)?,
            Init::Ones => Tensor::ones(shape)?,
            Init::Normal => Tensor::from_fn(shape, |_| T::from_f64(cfg.init_std * rng.gaussian()))?,
            Init::NearIdentity => Tensor::from_fn(shape, |k| {
                let eye = if k / cols == k % cols { 1.0 } else { 0.0 };
                T::from_f64(eye + cfg.mix_std * rng.gaussian())
            })?,
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams { tensors })
}

/// Scalar parameter count written out per component, independent of
/// [`build_toy_ivit`]'s shape list.
pub fn parameter_count(cfg: &ToyIViTConfig) -> usize {
    let mut total = cfg.stages[0].channels * (cfg.patch_dim() + 1);
    for (i, s) in cfg.stages.iter().enumerate() {
        let c = s.channels;
        if cfg.downsamples(i) {
            total += c * (cfg.stages[i - 1].channels + 1);
        }
        let hid = cfg.hidden(c);
        let norms = 4 * c;
        let mlp = 2 * c * hid + hid + c;
        let mixer = match s.mixer {
            Mixer::Pool => 0,
            Mixer::Attention(k) => {
                let mixes = match (k.has_interaction(), k.is_quadratic()) {
                    (false, _) => 0,
                    (true, true) => 2,
                    (true, false) => 4,
                };
                4 * c * c + c + mixes * s.heads * s.heads
            }
        };
        total += s.depth * (norms + mlp + mixer);
    }
    total + cfg.num_classes * (cfg.stages.last().map_or(0, |s| s.channels) + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;

    #[test]
    fn default_count_matches_closed_form() {
        let cfg = ToyIViTConfig::default();
        let p = build_toy_ivit::<f32>(&cfg, 0).unwrap();
        assert_eq!(p.num_scalars(), parameter_count(&cfg));
        // hand expansion of the default: embed 16→32, two pool stages of two
        // blocks at c = 32, lift 32→64, four iMHSA blocks at c = 64, H = 4
        let pool_block = 4 * 32 + 2 * 32 * 128 + 128 + 32;
        let attn_block = 4 * 64 + 2 * 64 * 256 + 256 + 64 + 4 * 64 * 64 + 64 + 4 * 16;
        let want = 32 * 17 + 4 * pool_block + 64 * 33 + 4 * attn_block + 4 * 65;
        assert_eq!(parameter_count(&cfg), want);
        for kind in AttentionKind::ALL {
            let c = cfg.clone().with_attention(kind);
            assert_eq!(build_toy_ivit::<f32>(&c, 0).unwrap().num_scalars(), parameter_count(&c), "{kind}");
        }
    }

    #[test]
    fn deterministic_and_named() {
        let cfg = ToyIViTConfig::default();
        let a = build_toy_ivit::<f32>(&cfg, 5).unwrap();
        let b = build_toy_ivit::<f32>(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_toy_ivit::<f32>(&cfg, 6).unwrap());
        assert!(a.get("stage2.block1.attn.mix.w2_k").is_ok());
        assert!(a.get("stage2.downsample.weight").is_ok());
        assert!(a.get("stage1.downsample.weight").is_err());
        assert_eq!(a.get("stage0.block0.norm1.gamma").unwrap().data(), &[1.0; 32]);
        let names: std::collections::HashSet<_> = a.names().collect();
        assert_eq!(names.len(), a.len());
    }

    #[test]
    fn from_map_checks_layout() {
        let cfg = ToyIViTConfig::default();
        let p = build_toy_ivit::<f32>(&cfg, 1).unwrap();
        let mut map = p.as_map().clone();
        assert_eq!(ModelParams::from_map(&cfg, map.clone()).unwrap(), p);
        map.insert("head.bias".into(), Tensor::zeros([3]).unwrap());
        assert!(ModelParams::from_map(&cfg, map).is_err());
    }
}
