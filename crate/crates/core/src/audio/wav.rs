//! Minimal WAV reader/writer for PCM16 mono 16 kHz clips.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Read a PCM16 mono 16 kHz WAV file to samples in [-1, 1].
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Data(format!("{} is not a RIFF/WAVE file", path.display())));
    }
    let mut off = 12usize;
    let mut fmt_ok = false;
    let mut data: Option<&[u8]> = None;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(&bytes, off + 4) as usize;
        let body_end = off + 8 + size;
        if body_end > bytes.len() {
            return Err(Error::Data("WAV chunk overruns file".into()));
        }
        let body = &bytes[off + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Data("WAV fmt chunk too short".into()));
                }
                let format = u16_at(body, 0);
                let channels = u16_at(body, 2);
                let rate = u32_at(body, 4);
                let bits = u16_at(body, 14);
                if format != 1 || channels != 1 || rate != SAMPLE_RATE || bits != 16 {
                    return Err(Error::Data(format!(
                        "need PCM16 mono {SAMPLE_RATE} Hz, got format={format} channels={channels} rate={rate} bits={bits}"
                    )));
                }
                fmt_ok = true;
            }
            b"data" => data = Some(body),
            _ => {}
        }
        off = body_end + (size & 1); // chunks are word-aligned
    }
    let (true, Some(data)) = (fmt_ok, data) else {
        return Err(Error::Data("WAV missing fmt or data chunk".into()));
    };
    Ok(data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect())
}

/// Write samples (clamped to [-1, 1]) as PCM16 mono 16 kHz.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}
