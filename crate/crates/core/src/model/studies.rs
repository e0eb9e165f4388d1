use std::time::Instant;

use super::config::ToyIViTConfig;
use super::forward::{forward, forward_flops};
use super::params::{build_toy_ivit, ModelParams};
use super::train::{evaluate, train, TrainOptions, TrainState};
use crate::attention::{cross_head_similarity, head_variance, AttentionKind};
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};

/// Train and validation splits of one task.
#[derive(Debug, Clone)]
pub struct Task<T: Scalar> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
}

/// A trained model with its validation accuracy and mean step time.
#[derive(Debug, Clone)]
pub struct TrainedModel<T: Scalar> {
    pub params: ModelParams<T>,
    pub accuracy: f64,
    pub wall_ms_per_step: f64,
}

/// Builds, trains and evaluates `cfg` on `task`.
pub fn train_and_evaluate<T: Scalar>(
    cfg: &ToyIViTConfig,
    task: &Task<T>,
    opts: &TrainOptions,
) -> Result<TrainedModel<T>> {
    let mut params = build_toy_ivit(cfg, opts.seed)?;
    let mut state = TrainState::new(&params, opts.seed)?;
    let start = Instant::now();
    train(cfg, &mut params, &mut state, &task.train, opts, |_, _| Ok(()))?;
    let wall_ms_per_step = start.elapsed().as_secs_f64() * 1e3 / opts.steps.max(1) as f64;
    let accuracy = evaluate(cfg, &params, &task.val, 256)?;
    Ok(TrainedModel { params, accuracy, wall_ms_per_step })
}

/// One row of the decomposition × interaction ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub decomposition: bool,
    pub interaction: bool,
    /// FLOPs of one single-sample forward pass of the whole model.
    pub flops: u64,
    /// Mean wall time of one training step.
    pub wall_ms: f64,
    pub top1: f64,
}

/// Variants in row order: both factors, decomposition only, interaction only.
pub const ABLATION_VARIANTS: [AttentionKind; 3] =
    [AttentionKind::Interactive, AttentionKind::Decomposed, AttentionKind::MhsaInteractive];

/// Trains the three ablation variants of `base` on `task`.
pub fn ablation_run<T: Scalar>(base: &ToyIViTConfig, task: &Task<T>, opts: &TrainOptions) -> Result<Vec<AblationRow>> {
    let (probe, _) = task.val.batch(&[0])?;
    ABLATION_VARIANTS
        .iter()
        .map(|&kind| {
            let cfg = base.clone().with_attention(kind);
            let trained = train_and_evaluate(&cfg, task, opts)?;
            Ok(AblationRow {
                decomposition: !kind.is_quadratic(),
                interaction: kind.has_interaction(),
                flops: forward_flops(&cfg, &trained.params, &probe)?,
                wall_ms: trained.wall_ms_per_step,
                top1: trained.accuracy,
            })
        })
        .collect()
}

/// Attention maps of one block for a batch.
#[derive(Debug, Clone)]
pub struct BlockMaps<T: Scalar> {
    pub stage: usize,
    pub block: usize,
    pub kind: AttentionKind,
    /// `A_Q: [B, H, N, L]`, or the full map for quadratic variants.
    pub first: Tensor<T>,
    /// `A_K: [B, H, L, N]`, or the full map for quadratic variants.
    pub second: Tensor<T>,
    /// `[B, H, N, N]`
    pub dense: Tensor<T>,
}

/// Runs the model on `input` and returns every attention block's maps.
pub fn attention_maps<T: Scalar>(
    cfg: &ToyIViTConfig,
    params: &ModelParams<T>,
    input: &Tensor<T>,
) -> Result<Vec<BlockMaps<T>>> {
    let mut tape = Tape::new();
    let f = forward(cfg, params, input, &mut tape)?;
    f.attention
        .iter()
        .map(|r| {
            let first = tape.value(r.maps.0)?.clone();
            let second = tape.value(r.maps.1)?.clone();
            let dense = if r.kind.is_quadratic() { first.clone() } else { ops::matmul(&first, &second, None)? };
            Ok(BlockMaps { stage: r.stage, block: r.block, kind: r.kind, first, second, dense })
        })
        .collect()
}

/// Head diagnostics of one attention layer for one head count.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagRow {
    pub heads: usize,
    /// Attention layer index in forward order.
    pub layer: usize,
    pub accuracy: f64,
    pub variance: f64,
    pub similarity: f64,
}

/// Trains `base` once per head count and reports, per attention layer, the
/// head variance and cross-head similarity of the dense maps averaged over
/// the first `probe` validation samples.
pub fn head_count_study<T: Scalar>(
    base: &ToyIViTConfig,
    heads: &[usize],
    task: &Task<T>,
    opts: &TrainOptions,
    probe: usize,
) -> Result<Vec<DiagRow>> {
    if let Some(&h) = heads.iter().find(|&&h| h < 2) {
        return Err(Error::invalid("diag", format!("cross-head similarity needs at least 2 heads, got {h}")));
    }
    let probe = probe.clamp(1, task.val.len());
    let (x, _) = task.val.batch(&(0..probe).collect::<Vec<_>>())?;
    let mut rows = Vec::new();
    for &h in heads {
        let cfg = base.clone().with_heads(h);
        let trained = train_and_evaluate(&cfg, task, opts)?;
        for (layer, maps) in attention_maps(&cfg, &trained.params, &x)?.into_iter().enumerate() {
            let (mut var, mut sim) = (0.0, 0.0);
            let per = maps.dense.len() / probe;
            let s = maps.dense.shape();
            let n = s[s.len() - 1];
            for sample in maps.dense.data().chunks(per) {
                let stack = Tensor::new([h, per / (h * n), n], sample.to_vec())?;
                var += head_variance(&stack)?;
                sim += cross_head_similarity(&stack)?;
            }
            rows.push(DiagRow {
                heads: h,
                layer,
                accuracy: trained.accuracy,
                variance: var / probe as f64,
                similarity: sim / probe as f64,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthTask;

    fn tiny_task() -> Task<f32> {
        let synth = SynthTask::default();
        Task { train: synth.dataset(1, 16).unwrap(), val: synth.dataset(2, 8).unwrap() }
    }

    #[test]
    fn ablation_has_three_rows_in_order() {
        let opts = TrainOptions { steps: 2, batch_size: 4, seed: 0 };
        let rows = ablation_run(&ToyIViTConfig::default(), &tiny_task(), &opts).unwrap();
        let flags: Vec<_> = rows.iter().map(|r| (r.decomposition, r.interaction)).collect();
        assert_eq!(flags, vec![(true, true), (true, false), (false, true)]);
        assert!(rows[0].flops < rows[2].flops);
    }

    #[test]
    fn diag_rows_per_head_and_layer() {
        let opts = TrainOptions { steps: 1, batch_size: 4, seed: 0 };
        let rows = head_count_study(&ToyIViTConfig::default(), &[2, 4], &tiny_task(), &opts, 3).unwrap();
        assert_eq!(rows.len(), 8);
        for r in &rows {
            assert!(r.variance >= 0.0 && (-1.0..=1.0 + 1e-9).contains(&r.similarity));
        }
        assert!(head_count_study(&ToyIViTConfig::default(), &[1], &tiny_task(), &opts, 3).is_err());
    }

    #[test]
    fn dense_maps_are_row_stochastic_without_interaction() {
        let cfg = ToyIViTConfig::default().with_attention(AttentionKind::Decomposed);
        let params = build_toy_ivit::<f64>(&cfg, 4).unwrap();
        let (x, _) = SynthTask::default().gen_synth_batch::<f64>(&mut crate::data::Rng::new(1), 2).unwrap();
        for m in attention_maps(&cfg, &params, &x).unwrap() {
            assert_eq!(m.dense.shape(), &[2, 4, 16, 16]);
            for row in m.dense.data().chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
