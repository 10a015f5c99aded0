//! Per-frame class labels: u32 count followed by `count` u32 class ids.

use std::path::Path;

use super::{put_u32, read_file, write_file, Reader, Result};

const FORMAT: &str = "label";

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * labels.len());
    put_u32(&mut out, labels.len() as u32);
    for &l in labels {
        put_u32(&mut out, l as u32);
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(bytes, FORMAT);
    let n = r.u32()? as usize;
    if n.checked_mul(4) != Some(r.remaining()) {
        return Err(r.corrupt(format!(
            "count {n} does not match {} payload bytes",
            r.remaining()
        )));
    }
    (0..n).map(|_| r.u32().map(|v| v as usize)).collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    decode_labels(&read_file(path)?)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_file(path, &encode_labels(labels))
}
