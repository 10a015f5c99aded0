//! 8-bit binary PGM (P5) export of a `T x K` matrix: height K with the highest
//! bin on the top row, width T, min-max scaled to 0..=255.

use std::path::Path;

use super::{write_file, IoError, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "PGM";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first.
    pub pixels: Vec<u8>,
}

/// A constant matrix maps to uniform mid-gray 128.
pub fn encode_pgm(m: &Tensor) -> Vec<u8> {
    assert_eq!(m.rank(), 2, "PGM export needs a matrix");
    let (t, k) = (m.dims()[0], m.dims()[1]);
    let (lo, hi) = m
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let range = hi - lo;
    let pixel = |v: f64| -> u8 {
        if range > 0.0 && range.is_finite() {
            (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    };
    let mut out = format!("P5\n{t} {k}\n255\n").into_bytes();
    for row in (0..k).rev() {
        for col in 0..t {
            out.push(pixel(m.data()[col * k + row]));
        }
    }
    out
}

pub fn write_pgm(path: &Path, m: &Tensor) -> Result<()> {
    write_file(path, &encode_pgm(m))
}

/// Parses the header this module writes (whitespace-separated, no comments).
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let corrupt = |r: &str| IoError::Corrupt {
        format: FORMAT,
        reason: r.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(IoError::BadMagic(FORMAT));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        let start = pos
            + bytes[pos..]
                .iter()
                .take_while(|b| b.is_ascii_whitespace())
                .count();
        let end = start
            + bytes[start..]
                .iter()
                .take_while(|b| b.is_ascii_digit())
                .count();
        if end == start || end - start > 9 {
            return Err(corrupt("bad header field"));
        }
        *f = std::str::from_utf8(&bytes[start..end])
            .unwrap()
            .parse()
            .unwrap();
        pos = end;
    }
    let [width, height, max] = fields;
    if max != 255 || width == 0 || height == 0 {
        return Err(corrupt("need a non-empty 8-bit image"));
    }
    if bytes.get(pos).is_none_or(|b| !b.is_ascii_whitespace()) {
        return Err(corrupt("missing separator after header"));
    }
    let pixels = &bytes[pos + 1..];
    if Some(pixels.len()) != width.checked_mul(height) {
        return Err(corrupt("pixel count does not match header"));
    }
    Ok(Pgm {
        width,
        height,
        pixels: pixels.to_vec(),
    })
}
