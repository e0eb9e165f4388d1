use std::path::PathBuf;

use super::config::{parse_num, ToyIViTConfig, MODEL_KEYS};
use super::studies::Task;
use super::train::TrainOptions;
use crate::data::{load_cifar10, ConfigMap, CifarSplit, SynthTask};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    Synth { noise: f64 },
    Cifar { dir: PathBuf },
}

/// Everything a training run needs besides the model shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ToyIViTConfig,
    pub task: TaskSource,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Synthetic samples to generate, or the CIFAR training subset size.
    pub train_size: usize,
    pub val_size: usize,
    pub eval_every: usize,
}

/// Keys accepted in a run config file.
pub const RUN_KEYS: &[&str] = &[
    "task", "data_dir", "noise", "seed", "steps", "epochs", "batch_size", "train_size", "val_size", "eval_every",
    "stages", "variant", "heads", "landmarks", "patch_size", "mlp_ratio", "lr", "schedule", "drop_path",
    "init_std",
];

/// Seed used when neither a flag, the environment nor a config sets one.
pub const DEFAULT_SEED: u64 = 7;

/// Offset separating the validation stream from the training stream.
const VAL_STREAM: u64 = 0x005E_ED0F_7A11;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ToyIViTConfig::default(),
            task: TaskSource::Synth { noise: SynthTask::default().noise },
            seed: DEFAULT_SEED,
            steps: 2000,
            batch_size: 32,
            train_size: 8192,
            val_size: 1024,
            eval_every: 100,
        }
    }
}

impl RunConfig {
    /// Builds a run from parsed `key = value` pairs on top of the defaults.
    /// `epochs` converts to steps over `train_size` samples.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        debug_assert!(MODEL_KEYS.iter().all(|k| RUN_KEYS.contains(k)));
        let mut run = RunConfig::default();
        match map.get("task").map(String::as_str) {
            None | Some("synth") => {
                let noise = map.get("noise").map(|v| parse_num("noise", v)).transpose()?;
                run.task = TaskSource::Synth { noise: noise.unwrap_or(SynthTask::default().noise) };
            }
            Some("cifar") => {
                let dir = map.get("data_dir").ok_or_else(|| Error::invalid("config", "task = cifar needs data_dir"))?;
                run.task = TaskSource::Cifar { dir: PathBuf::from(dir) };
                run.model = ToyIViTConfig::cifar();
                run.train_size = 10_000;
                run.val_size = 10_000;
            }
            Some(other) => return Err(Error::invalid("config", format!("unknown task `{other}` (synth, cifar)"))),
        }
        run.model = run.model.apply(map)?;
        let get = |k: &str| map.get(k).map(|v| parse_num::<usize>(k, v)).transpose();
        if let Some(v) = map.get("seed") {
            run.seed = parse_num("seed", v)?;
        }
        run.batch_size = get("batch_size")?.unwrap_or(run.batch_size);
        run.train_size = get("train_size")?.unwrap_or(run.train_size);
        run.val_size = get("val_size")?.unwrap_or(run.val_size);
        run.eval_every = get("eval_every")?.unwrap_or(run.eval_every);
        match (get("steps")?, get("epochs")?) {
            (Some(_), Some(_)) => return Err(Error::invalid("config", "set either steps or epochs, not both")),
            (Some(s), None) => run.steps = s,
            (None, Some(e)) => run.steps = e * run.train_size.div_ceil(run.batch_size.max(1)),
            (None, None) => {}
        }
        if run.batch_size == 0 || run.train_size == 0 || run.val_size == 0 {
            return Err(Error::invalid("config", "batch_size, train_size and val_size must be positive"));
        }
        Ok(run)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions { steps: self.steps, batch_size: self.batch_size, seed: self.seed }
    }

    /// Generates or reads the train and validation splits.
    pub fn load_task<T: Scalar>(&self) -> Result<Task<T>> {
        match &self.task {
            TaskSource::Synth { noise } => {
                let synth = SynthTask::with_noise(*noise);
                Ok(Task {
                    train: synth.dataset(self.seed, self.train_size)?,
                    val: synth.dataset(self.seed ^ VAL_STREAM, self.val_size)?,
                })
            }
            TaskSource::Cifar { dir } => Ok(Task {
                train: load_cifar10(dir, CifarSplit::Train, Some(self.train_size))?,
                val: load_cifar10(dir, CifarSplit::Test, Some(self.val_size))?,
            }),
        }
    }
}
