use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionKind, AttnConfig};
use crate::data::ConfigMap;
use crate::error::{Error, Result};

/// Token mixer used by every block of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mixer {
    /// 3×3 mean pooling minus the input.
    Pool,
    Attention(AttentionKind),
}

impl fmt::Display for Mixer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mixer::Pool => f.write_str("pool"),
            Mixer::Attention(k) => k.fmt(f),
        }
    }
}

impl FromStr for Mixer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "pool" {
            Ok(Mixer::Pool)
        } else {
            s.parse().map(Mixer::Attention)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub mixer: Mixer,
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
}

impl StageSpec {
    pub fn pool(depth: usize, channels: usize) -> Self {
        StageSpec { mixer: Mixer::Pool, depth, channels, heads: 1 }
    }

    pub fn attention(kind: AttentionKind, depth: usize, channels: usize, heads: usize) -> Self {
        StageSpec { mixer: Mixer::Attention(kind), depth, channels, heads }
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.mixer, self.depth, self.channels, self.heads)
    }
}

impl FromStr for StageSpec {
    type Err = Error;

    /// `mixer:depth:channels:heads`, e.g. `imhsa:2:64:4`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let bad = || Error::invalid("stage", format!("`{s}` is not mixer:depth:channels:heads"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        Ok(StageSpec { mixer: parts[0].parse()?, depth: num(parts[1])?, channels: num(parts[2])?, heads: num(parts[3])? })
    }
}

/// Learning-rate schedule over a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` at the first step to 0 after the last.
    Cosine,
}

impl LrSchedule {
    /// Rate for 1-based `step` of `total`.
    pub fn rate(self, lr: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let progress = step.saturating_sub(1) as f64 / total.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::invalid("schedule", format!("unknown schedule `{other}` (constant, cosine)"))),
        }
    }
}

/// Shape and optimisation settings of the toy hierarchical model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyIViTConfig {
    /// Spatial extents of the input image or token grid.
    pub image: (usize, usize),
    pub in_channels: usize,
    pub patch_size: usize,
    pub stages: Vec<StageSpec>,
    pub mlp_ratio: f64,
    /// Requested landmark grid, clamped per stage to the token grid.
    pub landmark_grid: (usize, usize),
    pub num_classes: usize,
    pub lr: f64,
    /// Applied by [`train`](super::train); single steps use `lr` as is.
    pub schedule: LrSchedule,
    /// Stochastic depth is not implemented; only 0 is accepted.
    pub drop_path: f64,
    pub init_std: f64,
    pub mix_std: f64,
    pub ln_eps: f64,
}

impl Default for ToyIViTConfig {
    /// Synthetic-task model: two pooling stages at 32 channels, then two
    /// iMHSA stages at 64 channels with 4 heads.
    fn default() -> Self {
        ToyIViTConfig {
            image: (8, 8),
            in_channels: 16,
            patch_size: 1,
            stages: vec![
                StageSpec::pool(2, 32),
                StageSpec::pool(2, 32),
                StageSpec::attention(AttentionKind::Interactive, 2, 64, 4),
                StageSpec::attention(AttentionKind::Interactive, 2, 64, 4),
            ],
            mlp_ratio: 4.0,
            landmark_grid: (2, 2),
            num_classes: 4,
            lr: 1e-3,
            schedule: LrSchedule::Cosine,
            drop_path: 0.0,
            init_std: 0.02,
            mix_std: 0.01,
            ln_eps: 1e-5,
        }
    }
}

impl ToyIViTConfig {
    /// Same stages on 32×32 RGB images cut into 4×4 patches, 10 classes.
    pub fn cifar() -> Self {
        ToyIViTConfig { image: (32, 32), in_channels: 3, patch_size: 4, num_classes: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("ToyIViTConfig", detail));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        if !self.stages.iter().any(|s| matches!(s.mixer, Mixer::Attention(_))) {
            return bad("at least one attention stage is required".into());
        }
        let (h, w) = self.image;
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 || h == 0 || w == 0 {
            return bad(format!("image {h}×{w} not divisible into {0}×{0} patches", self.patch_size));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.channels == 0 || s.heads == 0 {
                return bad(format!("stage {i} has a zero extent"));
            }
            if s.channels % s.heads != 0 {
                return bad(format!("stage {i}: {} heads do not divide {} channels", s.heads, s.channels));
            }
            if i > 0 && s.channels < self.stages[i - 1].channels {
                return bad(format!("stage {i} narrows channels"));
            }
        }
        if !(self.mlp_ratio > 0.0) || self.hidden(self.stages[0].channels) == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.drop_path != 0.0 {
            return bad("drop_path must be 0: stochastic depth is not implemented".into());
        }
        if self.landmark_grid.0 == 0 || self.landmark_grid.1 == 0 {
            return bad("landmark grid needs positive extents".into());
        }
        for v in [self.lr, self.init_std, self.mix_std, self.ln_eps] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad("lr, init_std, mix_std and ln_eps must be finite and non-negative".into());
            }
        }
        Ok(())
    }

    /// MLP hidden width for `channels`.
    pub fn hidden(&self, channels: usize) -> usize {
        (channels as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// Whether stage `i` begins with a 2×2 downsampling and channel lift.
    /// Only stages that widen the channels downsample.
    pub fn downsamples(&self, i: usize) -> bool {
        i > 0 && self.stages[i].channels != self.stages[i - 1].channels
    }

    /// Token grid of every stage.
    pub fn stage_grids(&self) -> Vec<(usize, usize)> {
        let mut grid = (self.image.0 / self.patch_size, self.image.1 / self.patch_size);
        (0..self.stages.len())
            .map(|i| {
                if self.downsamples(i) {
                    grid = ((grid.0 / 2).max(1), (grid.1 / 2).max(1));
                }
                grid
            })
            .collect()
    }

    /// Attention shape for stage `i`, or `None` for pooling stages.
    pub fn attn_config(&self, i: usize) -> Result<Option<AttnConfig>> {
        let s = &self.stages[i];
        match s.mixer {
            Mixer::Pool => Ok(None),
            Mixer::Attention(_) => {
                AttnConfig::clamped(s.heads, s.channels / s.heads, self.stage_grids()[i], self.landmark_grid).map(Some)
            }
        }
    }

    /// Replaces the mixer of every attention stage.
    pub fn with_attention(mut self, kind: AttentionKind) -> Self {
        for s in &mut self.stages {
            if let Mixer::Attention(_) = s.mixer {
                s.mixer = Mixer::Attention(kind);
            }
        }
        self
    }

    /// Sets the head count of every attention stage.
    pub fn with_heads(mut self, heads: usize) -> Self {
        for s in &mut self.stages {
            if let Mixer::Attention(_) = s.mixer {
                s.heads = heads;
            }
        }
        self
    }

    /// Applies the model keys of a parsed config file on top of `self`.
    pub fn apply(mut self, map: &ConfigMap) -> Result<Self> {
        if let Some(v) = map.get("stages") {
            self.stages = v.split(',').map(str::parse).collect::<Result<_>>()?;
        }
        if let Some(v) = map.get("variant") {
            self = self.with_attention(v.parse()?);
        }
        if let Some(v) = map.get("heads") {
            self = self.with_heads(parse_num("heads", v)?);
        }
        if let Some(v) = map.get("landmarks") {
            self.landmark_grid = parse_grid("landmarks", v)?;
        }
        if let Some(v) = map.get("patch_size") {
            self.patch_size = parse_num("patch_size", v)?;
        }
        if let Some(v) = map.get("mlp_ratio") {
            self.mlp_ratio = parse_num("mlp_ratio", v)?;
        }
        if let Some(v) = map.get("lr") {
            self.lr = parse_num("lr", v)?;
        }
        if let Some(v) = map.get("schedule") {
            self.schedule = v.parse()?;
        }
        if let Some(v) = map.get("drop_path") {
            self.drop_path = parse_num("drop_path", v)?;
        }
        if let Some(v) = map.get("init_std") {
            self.init_std = parse_num("init_std", v)?;
        }
        self.validate()?;
        Ok(self)
    }
}

/// Model keys accepted by [`ToyIViTConfig::apply`].
pub const MODEL_KEYS: &[&str] =
    &["stages", "variant", "heads", "landmarks", "patch_size", "mlp_ratio", "lr", "schedule", "drop_path", "init_std"];

pub(crate) fn parse_num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim().parse().map_err(|_| Error::invalid("config", format!("`{key}`: cannot parse `{v}`")))
}

/// `7x7`, `7×7` or a square count such as `49`.
pub fn parse_grid(key: &str, v: &str) -> Result<(usize, usize)> {
    let v = v.trim();
    if let Some((a, b)) = v.split_once(['x', '×']) {
        return Ok((parse_num(key, a)?, parse_num(key, b)?));
    }
    let n: usize = parse_num(key, v)?;
    crate::attention::square_side(n)
        .map(|s| (s, s))
        .ok_or_else(|| Error::invalid("config", format!("`{key}`: {n} is not a square")))
}
