//! Deterministic data sources and the file formats shared with the CLI.

mod checkpoint;
mod cifar;
mod config;
mod csv_out;
mod rng;
mod synth;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use cifar::{
    decode_cifar10, load_cifar10, read_cifar10_file, Cifar10Record, CifarSplit, CIFAR_IMAGE_SIDE,
    CIFAR_RECORD_BYTES,
};
pub use config::{parse_config, parse_config_file, serialize_config, ConfigMap};
pub use csv_out::{csv_string, write_csv};
pub use rng::Rng;
pub use synth::{Dataset, SynthTask};
