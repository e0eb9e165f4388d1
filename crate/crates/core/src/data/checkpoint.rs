//! Checkpoint files: a text header followed by little-endian f32 blobs.
//!
//! ```text
//! IVIT-CKPT-1
//! <name> <d0>x<d1>x... <byte offset into the data section>
//! ...
//! <blank line>
//! <f32 data in header order>
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "IVIT-CKPT-1";

pub fn encode_checkpoint(params: &IndexMap<String, Tensor<f32>>) -> Vec<u8> {
    let mut header = format!("{CHECKPOINT_MAGIC}\n");
    let mut offset = 0usize;
    for (name, t) in params {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name} {} {offset}\n", dims.join("x")));
        offset += t.len() * 4;
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.reserve(offset);
    for t in params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<IndexMap<String, Tensor<f32>>> {
    const WHAT: &str = "checkpoint";
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::format(WHAT, "missing blank line after header"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::format(WHAT, "header is not UTF-8"))?;
    let data = &bytes[split + 2..];
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::format(WHAT, format!("first line must be {CHECKPOINT_MAGIC}")));
    }
    let mut out = IndexMap::new();
    let mut expected_offset = 0usize;
    for line in lines {
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, shape, offset] = fields[..] else {
            return Err(Error::format(WHAT, format!("bad header line `{line}`")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::format(WHAT, format!("bad shape in `{line}`"))))
            .collect::<Result<_>>()?;
        let offset: usize = offset.parse().map_err(|_| Error::format(WHAT, format!("bad offset in `{line}`")))?;
        if offset != expected_offset {
            return Err(Error::format(WHAT, format!("`{name}` at offset {offset}, expected {expected_offset}")));
        }
        let len: usize = shape.iter().product();
        let blob = data
            .get(offset..offset + 4 * len)
            .ok_or_else(|| Error::format(WHAT, format!("data for `{name}` is truncated")))?;
        let values = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if out.insert(name.to_string(), Tensor::new(shape, values)?).is_some() {
            return Err(Error::format(WHAT, format!("duplicate tensor `{name}`")));
        }
        expected_offset = offset + 4 * len;
    }
    if expected_offset != data.len() {
        return Err(Error::format(WHAT, format!("{} trailing bytes", data.len() - expected_offset)));
    }
    Ok(out)
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &IndexMap<String, Tensor<f32>>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<IndexMap<String, Tensor<f32>>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_roundtrip() {
        let mut p = IndexMap::new();
        p.insert("a.w".to_string(), Tensor::<f32>::from_fn([2, 3], |i| i as f32 - 2.5).unwrap());
        p.insert("b".to_string(), Tensor::<f32>::from_f64([1], &[1e-30]).unwrap());
        let bytes = encode_checkpoint(&p);
        let text = b"IVIT-CKPT-1\na.w 2x3 0\nb 1 24\n\n";
        assert_eq!(&bytes[..text.len()], text);
        assert_eq!(bytes.len(), text.len() + 28);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"NOPE\n\n").is_err());
    }
}
