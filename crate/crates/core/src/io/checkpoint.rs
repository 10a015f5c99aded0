//! `SMCK` checkpoints.
//!
//! ```text
//! "SMCK" u32 version
//! u32 count, then per tensor: name, u32 rank, rank x u32 dims, f32 values
//! u8 has_optimizer
//!   u64 step, u32 count, per entry: name, u32 rank, dims, f32 m, f32 v
//!   text schedule block (key=value lines)
//! text config block (key=value lines)
//! 32-byte SHA-256 of everything above
//! ```
//! Strings and text blocks are a u32 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{put_f32s, put_string, put_u32, read_file, write_file, IoError, Reader, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "checkpoint";
const DIGEST: usize = 32;
const MAX_RANK: usize = 8;

/// Adam moments and schedule state for exact resumption.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// `(parameter name, first moment, second moment)`.
    pub moments: Vec<(String, Tensor, Tensor)>,
    pub schedule: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    pub config: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.get(key).map(String::as_str)
    }
}

fn put_dims(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &d in t.dims() {
        put_u32(out, d as u32);
    }
}

fn put_block(out: &mut Vec<u8>, kv: &BTreeMap<String, String>) {
    let text: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_string(out, &text);
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"SMCK");
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, c.tensors.len() as u32);
    for (name, t) in &c.tensors {
        put_string(&mut out, name);
        put_dims(&mut out, t);
        put_f32s(&mut out, t.data());
    }
    match &c.optimizer {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            out.extend_from_slice(&o.step.to_le_bytes());
            put_u32(&mut out, o.moments.len() as u32);
            for (name, m, v) in &o.moments {
                assert_eq!(m.dims(), v.dims(), "moment shapes differ for {name}");
                put_string(&mut out, name);
                put_dims(&mut out, m);
                put_f32s(&mut out, m.data());
                put_f32s(&mut out, v.data());
            }
            put_block(&mut out, &o.schedule);
        }
    }
    put_block(&mut out, &c.config);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn read_dims(r: &mut Reader) -> Result<(Vec<usize>, usize)> {
    let rank = r.u32()? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(r.corrupt(format!("rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut n: usize = 1;
    for _ in 0..rank {
        let d = r.u32()? as usize;
        n = n.checked_mul(d).ok_or_else(|| r.corrupt("size overflow"))?;
        dims.push(d);
    }
    if n == 0 {
        return Err(r.corrupt("zero-sized tensor"));
    }
    if n.saturating_mul(4) > r.remaining() {
        return Err(r.corrupt("tensor larger than the remaining file"));
    }
    Ok((dims, n))
}

fn read_tensor_values(r: &mut Reader, dims: Vec<usize>, n: usize) -> Result<Tensor> {
    let data = r.f32s(n)?;
    Tensor::new(dims, data).map_err(|e| r.corrupt(e.to_string()))
}

fn read_block(r: &mut Reader) -> Result<BTreeMap<String, String>> {
    let text = r.string()?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| r.corrupt(format!("bad config line {line:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    Ok(kv)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != b"SMCK" {
        return Err(IoError::BadMagic(FORMAT));
    }
    let mut r = Reader::new(bytes, FORMAT);
    r.bytes(4)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::Version {
            format: FORMAT,
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 8 + DIGEST {
        return Err(r.corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(r.corrupt("checksum mismatch"));
    }
    let mut r = Reader::new(body, FORMAT);
    r.bytes(8)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let (dims, n) = read_dims(&mut r)?;
        tensors.push((name, read_tensor_values(&mut r, dims, n)?));
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let count = r.u32()? as usize;
            let mut moments = Vec::new();
            for _ in 0..count {
                let name = r.string()?;
                let (dims, n) = read_dims(&mut r)?;
                let m = read_tensor_values(&mut r, dims.clone(), n)?;
                let v = read_tensor_values(&mut r, dims, n)?;
                moments.push((name, m, v));
            }
            let schedule = read_block(&mut r)?;
            Some(OptimizerState {
                step,
                moments,
                schedule,
            })
        }
        f => return Err(r.corrupt(format!("optimizer flag {f}"))),
    };
    let config = read_block(&mut r)?;
    r.finish()?;
    Ok(Checkpoint {
        tensors,
        optimizer,
        config,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

pub fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(c))
}
