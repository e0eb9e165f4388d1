use indexmap::IndexMap;

use super::config::ToyIViTConfig;
use super::forward::{forward, predict};
use super::params::ModelParams;
use crate::autodiff::Tape;
use crate::data::{Dataset, Rng};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimiser state carried between [`train_step`] calls.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub step: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
    /// Drives batch order.
    pub rng: Rng,
    /// Exponential moving averages (factor 0.9) of the step loss and accuracy.
    pub running_loss: f64,
    pub running_accuracy: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &ModelParams<T>, seed: u64) -> Result<Self> {
        let zeros = || -> Result<IndexMap<String, Tensor<T>>> {
            params.iter().map(|(k, t)| Ok((k.clone(), Tensor::zeros(t.shape().to_vec())?))).collect()
        };
        Ok(TrainState { step: 0, m: zeros()?, v: zeros()?, rng: Rng::new(seed), running_loss: 0.0, running_accuracy: 0.0 })
    }
}

/// Loss and accuracy of one optimisation step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
}

fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.last_dim();
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Index of the largest entry, the first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// One Adam step at rate `cfg.lr` on the mean cross-entropy of `batch`.
pub fn train_step<T: Scalar>(
    cfg: &ToyIViTConfig,
    params: &mut ModelParams<T>,
    state: &mut TrainState<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<StepStats> {
    train_step_at(cfg, params, state, batch, labels, cfg.lr)
}

/// [`train_step`] with an explicit learning rate.
pub fn train_step_at<T: Scalar>(
    cfg: &ToyIViTConfig,
    params: &mut ModelParams<T>,
    state: &mut TrainState<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let f = forward(cfg, params, batch, &mut tape)?;
    let loss_var = tape.cross_entropy(f.logits, labels)?;
    let loss = tape.value(loss_var)?.data()[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "train_step loss" });
    }
    let acc = accuracy(tape.value(f.logits)?, labels);
    let grads = tape.backward(loss_var)?;

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, &var) in &f.params {
        let g = grads.wrt(var)?;
        let p = params.get_mut(name).expect("forward only records model parameters");
        let m = state.m.get_mut(name).expect("state matches params");
        let v = state.v.get_mut(name).expect("state matches params");
        for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let g = g.as_f64();
            let mn = b1 * m.as_f64() + (1.0 - b1) * g;
            let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::from_f64(mn);
            *v = T::from_f64(vn);
            let step = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
            *p = T::from_f64(p.as_f64() - step);
        }
    }
    let ema = |old: f64, new: f64| if t == 1 { new } else { 0.9 * old + 0.1 * new };
    state.running_loss = ema(state.running_loss, loss);
    state.running_accuracy = ema(state.running_accuracy, acc);
    Ok(StepStats { step: state.step, loss, accuracy: acc })
}

/// Top-1 accuracy over `data`, evaluated in batches of `batch_size`.
pub fn evaluate<T: Scalar>(
    cfg: &ToyIViTConfig,
    params: &ModelParams<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let preds = predictions(cfg, params, data, batch_size)?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Predicted class of every sample.
pub fn predictions<T: Scalar>(
    cfg: &ToyIViTConfig,
    params: &ModelParams<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        let logits = predict(cfg, params, &x)?;
        out.extend(logits.data().chunks(logits.last_dim()).map(argmax));
    }
    Ok(out)
}

/// Settings of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds initialisation and batch order.
    pub seed: u64,
}

/// Runs `opts.steps` Adam steps over shuffled epochs of `data` following
/// `cfg.schedule`, calling `on_step` with the updated parameters after each.
pub fn train<T: Scalar>(
    cfg: &ToyIViTConfig,
    params: &mut ModelParams<T>,
    state: &mut TrainState<T>,
    data: &Dataset<T>,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepStats, &ModelParams<T>) -> Result<()>,
) -> Result<Vec<StepStats>> {
    if data.is_empty() || opts.batch_size == 0 {
        return Err(Error::invalid("train", "empty dataset or zero batch size"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(opts.steps);
    for i in 1..=opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        while batch.len() < opts.batch_size {
            if cursor == order.len() {
                state.rng.shuffle(&mut order);
                cursor = 0;
            }
            let take = (opts.batch_size - batch.len()).min(order.len() - cursor);
            batch.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (x, y) = data.batch(&batch)?;
        let lr = cfg.schedule.rate(cfg.lr, i, opts.steps);
        let stats = train_step_at(cfg, params, state, &x, &y, lr)?;
        on_step(&stats, params)?;
        log.push(stats);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthTask;
    use crate::model::build_toy_ivit;

    #[test]
    fn zero_lr_leaves_params() {
        let cfg = ToyIViTConfig { lr: 0.0, ..Default::default() };
        let mut params = build_toy_ivit::<f32>(&cfg, 1).unwrap();
        let before = params.clone();
        let mut state = TrainState::new(&params, 1).unwrap();
        let (x, y) = SynthTask::default().gen_synth_batch::<f32>(&mut Rng::new(2), 4).unwrap();
        train_step(&cfg, &mut params, &mut state, &x, &y).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn initial_loss_near_log_k() {
        let cfg = ToyIViTConfig::default();
        let mut params = build_toy_ivit::<f32>(&cfg, 1).unwrap();
        let mut state = TrainState::new(&params, 1).unwrap();
        let (x, y) = SynthTask::default().gen_synth_batch::<f32>(&mut Rng::new(2), 16).unwrap();
        let s = train_step(&cfg, &mut params, &mut state, &x, &y).unwrap();
        assert!((s.loss - 4f64.ln()).abs() < 0.2, "{}", s.loss);
    }

    #[test]
    fn bad_labels_are_rejected() {
        let cfg = ToyIViTConfig::default();
        let mut params = build_toy_ivit::<f32>(&cfg, 1).unwrap();
        let mut state = TrainState::new(&params, 1).unwrap();
        let (x, _) = SynthTask::default().gen_synth_batch::<f32>(&mut Rng::new(2), 2).unwrap();
        assert!(train_step(&cfg, &mut params, &mut state, &x, &[0, 4]).is_err());
    }

    #[test]
    fn argmax_prefers_first_max() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0f64]), 0);
    }
}
