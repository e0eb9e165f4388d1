//! Toy hierarchical vision model: pooling-mixer stages followed by attention
//! stages, trained with Adam on the tape.
//!
//! Layout for the default config on an 8×8 grid of 16-dim tokens:
//!
//! ```text
//! patch embed 16→32 │ pool ×2 │ pool ×2 │ 2×2 pool + lift 32→64 │ iMHSA ×2 │ iMHSA ×2 │ mean + linear
//!      8×8               8×8       8×8             4×4                4×4        4×4
//! ```

mod config;
mod experiment;
mod forward;
mod params;
mod studies;
mod train;

use std::path::Path;

pub use config::{parse_grid, LrSchedule, Mixer, StageSpec, ToyIViTConfig, MODEL_KEYS};
pub use experiment::{RunConfig, TaskSource, DEFAULT_SEED, RUN_KEYS};
pub use forward::{forward, forward_flops, forward_vars, patchify, predict, AttnRecord, Forward};
pub use params::{build_toy_ivit, parameter_count, ModelParams};
pub use studies::{
    ablation_run, attention_maps, head_count_study, train_and_evaluate, AblationRow, BlockMaps, DiagRow, Task,
    TrainedModel, ABLATION_VARIANTS,
};
pub use train::{
    argmax, evaluate, predictions, train, train_step, train_step_at, StepStats, TrainOptions, TrainState, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};

use crate::data::{read_checkpoint, write_checkpoint};
use crate::error::Result;
use crate::tensor::Scalar;

/// Writes `params` as f32 to a checkpoint file.
pub fn save_params<T: Scalar>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    write_checkpoint(path, params.cast::<f32>().as_map())
}

/// Reads a checkpoint and checks it against the layout of `cfg`.
pub fn load_params<T: Scalar>(path: impl AsRef<Path>, cfg: &ToyIViTConfig) -> Result<ModelParams<T>> {
    let map = read_checkpoint(path)?;
    Ok(ModelParams::from_map(cfg, map)?.cast())
}
