//! CIFAR-10 binary format: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes, each plane row-major.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_IMAGE_SIDE: usize = 32;
const PLANE: usize = CIFAR_IMAGE_SIDE * CIFAR_IMAGE_SIDE;

#[derive(Debug, Clone, PartialEq)]
pub struct Cifar10Record {
    pub label: u8,
    /// `32×32×3`, channel-last, scaled to `[0, 1]`.
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

impl CifarSplit {
    fn files(self) -> Vec<String> {
        match self {
            CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarSplit::Test => vec!["test_batch.bin".to_string()],
        }
    }
}

/// Parses a buffer of whole records.
pub fn decode_cifar10(bytes: &[u8]) -> Result<Vec<Cifar10Record>> {
    const WHAT: &str = "CIFAR-10 file";
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::format(
            WHAT,
            format!("{} bytes is not a multiple of {CIFAR_RECORD_BYTES} (truncated record)", bytes.len()),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if label > 9 {
                return Err(Error::format(WHAT, format!("record {i} has label {label}")));
            }
            let planes = &rec[1..];
            let mut pixels = Vec::with_capacity(3 * PLANE);
            for p in 0..PLANE {
                for ch in 0..3 {
                    pixels.push(planes[ch * PLANE + p] as f32 / 255.0);
                }
            }
            Ok(Cifar10Record { label, pixels })
        })
        .collect()
}

pub fn read_cifar10_file(path: impl AsRef<Path>) -> Result<Vec<Cifar10Record>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar10(&bytes)
}

/// Loads a split from the standard `cifar-10-batches-bin` directory, keeping
/// at most `limit` records.
pub fn load_cifar10<T: Scalar>(dir: impl AsRef<Path>, split: CifarSplit, limit: Option<usize>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let limit = limit.unwrap_or(usize::MAX);
    let mut records = Vec::new();
    for name in split.files() {
        if records.len() >= limit {
            break;
        }
        records.extend(read_cifar10_file(dir.join(name))?);
    }
    records.truncate(limit);
    if records.is_empty() {
        return Err(Error::format("CIFAR-10 directory", "no records"));
    }
    let side = CIFAR_IMAGE_SIDE;
    let mut data = Vec::with_capacity(records.len() * 3 * PLANE);
    let mut labels = Vec::with_capacity(records.len());
    for r in &records {
        data.extend(r.pixels.iter().map(|&v| T::from_f64(v as f64)));
        labels.push(r.label as usize);
    }
    let inputs = Tensor::new([records.len(), side, side, 3], data)?;
    Ok(Dataset { inputs, labels, num_classes: 10 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3 * PLANE).map(fill));
        r
    }

    #[test]
    fn decodes_planar_channels() {
        let mut bytes = record(3, |i| (i / PLANE) as u8 * 100);
        bytes.extend(record(9, |_| 255));
        let recs = decode_cifar10(&bytes).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].label, 3);
        assert_eq!(&recs[0].pixels[..3], &[0.0, 100.0 / 255.0, 200.0 / 255.0]);
        assert!(recs[1].pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_truncation_and_bad_labels() {
        let bytes = record(1, |_| 0);
        assert!(decode_cifar10(&bytes[..CIFAR_RECORD_BYTES - 1]).is_err());
        assert!(decode_cifar10(&record(10, |_| 0)).is_err());
    }
}
