//! Canonical 44-byte-header WAV: mono, 16-bit PCM, 16 kHz. Anything else is rejected.

use std::path::Path;

use super::{read_file, write_file, IoError, Reader, Result};
use crate::dsp::{Waveform, SAMPLE_RATE};

const FORMAT: &str = "WAV";
const HEADER: usize = 44;

/// Rounds to the nearest 16-bit code and back: the value a WAV round trip yields.
pub fn quantize(x: f64) -> f64 {
    to_i16(x) as f64 / 32768.0
}

fn to_i16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(HEADER + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        out.extend_from_slice(&to_i16(s).to_le_bytes());
    }
    out
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let unsupported = |reason: String| IoError::Unsupported {
        format: FORMAT,
        reason,
    };
    let mut r = Reader::new(bytes, FORMAT);
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(IoError::BadMagic(FORMAT));
    }
    r.bytes(4)?;
    let riff_len = r.u32()? as usize;
    r.bytes(4)?;
    if r.bytes(4)? != b"fmt " || r.u32()? != 16 {
        return Err(unsupported(
            "expected a 16-byte fmt chunk right after the RIFF header".into(),
        ));
    }
    let (format, channels, rate) = (r.u16()?, r.u16()?, r.u32()?);
    let (byte_rate, align, bits) = (r.u32()?, r.u16()?, r.u16()?);
    if format != 1 || channels != 1 || bits != 16 {
        return Err(unsupported(format!(
            "format {format}, {channels} channels, {bits} bits (need PCM mono 16-bit)"
        )));
    }
    if rate != SAMPLE_RATE {
        return Err(unsupported(format!("{rate} Hz (need {SAMPLE_RATE} Hz)")));
    }
    if byte_rate != rate * 2 || align != 2 {
        return Err(r.corrupt("inconsistent byte rate or block alignment"));
    }
    if r.bytes(4)? != b"data" {
        return Err(unsupported("expected the data chunk at byte 36".into()));
    }
    let data_len = r.u32()? as usize;
    if data_len % 2 != 0 || riff_len != 36 + data_len {
        return Err(r.corrupt("inconsistent chunk sizes"));
    }
    let data = r.bytes(data_len)?;
    r.finish()?;
    if data.is_empty() {
        return Err(r.corrupt("no samples"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: rate,
    })
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    decode_wav(&read_file(path)?)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    write_file(path, &encode_wav(w))
}
