//! Binary PGM (P5) export of attention maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Min-max normalizes `[R, C]` to bytes with `floor((v - min) / (max - min) · 255)`.
/// A constant matrix maps to all zeros.
pub fn normalize_to_bytes<T: Scalar>(attn: &Tensor<T>) -> Result<Vec<u8>> {
    if attn.rank() != 2 {
        return Err(Error::shape("heatmap", format!("expected [R, C], got {:?}", attn.shape())));
    }
    attn.ensure_finite("heatmap")?;
    let values = attn.to_f64_vec();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    Ok(values
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).floor().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect())
}

/// Encodes `[R, C]` as a P5 image: `P5\n<C> <R>\n255\n` followed by row-major bytes.
pub fn encode_pgm<T: Scalar>(attn: &Tensor<T>) -> Result<Vec<u8>> {
    let pixels = normalize_to_bytes(attn)?;
    let (rows, cols) = (attn.shape()[0], attn.shape()[1]);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn export_attention_heatmap<T: Scalar>(attn: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(attn)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A decoded 8-bit greyscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

/// Strict P5 reader following the netpbm header grammar (whitespace-separated
/// fields, `#` comments, exactly one whitespace byte before the raster).
pub fn read_pgm(bytes: &[u8]) -> Result<PgmImage> {
    const WHAT: &str = "PGM";
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(WHAT, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut field = || -> Result<usize> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(WHAT, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(WHAT, format!("bad header field at byte {start}")))
    };
    let width = field()?;
    let height = field()?;
    let maxval = field()?;
    if width == 0 || height == 0 || !(1..=255).contains(&maxval) {
        return Err(Error::format(WHAT, format!("unsupported header {width}x{height} max {maxval}")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(WHAT, "missing separator before raster"));
    }
    let raster = &bytes[pos + 1..];
    if raster.len() != width * height {
        return Err(Error::format(WHAT, format!("raster has {} bytes, expected {}", raster.len(), width * height)));
    }
    Ok(PgmImage { width, height, maxval: maxval as u16, pixels: raster.to_vec() })
}
