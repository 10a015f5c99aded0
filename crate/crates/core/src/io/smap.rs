//! `SMAP` matrices: magic, u32 version, u32 rows, u32 cols, row-major f32.

use std::path::Path;

use super::{put_f32s, put_u32, read_file, write_file, IoError, Reader, Result};
use crate::tensor::Tensor;

pub const SMAP_VERSION: u32 = 1;
const FORMAT: &str = "SMAP";

/// Encodes a rank-2 tensor; values are rounded to `f32`.
pub fn encode_smap(m: &Tensor) -> Vec<u8> {
    assert_eq!(m.rank(), 2, "SMAP holds matrices");
    let mut out = Vec::with_capacity(16 + 4 * m.len());
    out.extend_from_slice(b"SMAP");
    put_u32(&mut out, SMAP_VERSION);
    put_u32(&mut out, m.dims()[0] as u32);
    put_u32(&mut out, m.dims()[1] as u32);
    put_f32s(&mut out, m.data());
    out
}

pub fn decode_smap(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, FORMAT);
    if bytes.len() < 4 || &bytes[..4] != b"SMAP" {
        return Err(IoError::BadMagic(FORMAT));
    }
    r.bytes(4)?;
    let version = r.u32()?;
    if version != SMAP_VERSION {
        return Err(IoError::Version {
            format: FORMAT,
            found: version,
            supported: SMAP_VERSION,
        });
    }
    let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
    if rows == 0 || cols == 0 {
        return Err(r.corrupt("empty matrix"));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| r.corrupt("size overflow"))?;
    if n.checked_mul(4) != Some(r.remaining()) {
        return Err(r.corrupt(format!(
            "{rows}x{cols} needs {n} values, payload has {} bytes",
            r.remaining()
        )));
    }
    let data = r.f32s(n)?;
    Tensor::new([rows, cols], data).map_err(|e| r.corrupt(e.to_string()))
}

pub fn read_smap(path: &Path) -> Result<Tensor> {
    decode_smap(&read_file(path)?)
}

pub fn write_smap(path: &Path, m: &Tensor) -> Result<()> {
    write_file(path, &encode_smap(m))
}
