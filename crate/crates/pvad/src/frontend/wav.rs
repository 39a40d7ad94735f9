//! Minimal RIFF/WAVE reader and writer for mono 16 kHz PCM16.

use super::{AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

fn input_err(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}

/// Read a WAV file, accepting only PCM16 mono 16 kHz little-endian.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(input_err("not a RIFF/WAVE file"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(input_err("truncated WAV chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(input_err("fmt chunk too small"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| input_err("WAV file has no fmt chunk"))?;
    if format != 1 {
        return Err(input_err(format!(
            "unsupported WAV encoding {format} (need PCM=1)"
        )));
    }
    if channels != 1 {
        return Err(input_err(format!(
            "unsupported channel count {channels} (need mono)"
        )));
    }
    if rate != SAMPLE_RATE {
        return Err(input_err(format!(
            "unsupported sample rate {rate} (need {SAMPLE_RATE})"
        )));
    }
    if bits != 16 {
        return Err(input_err(format!("unsupported bit depth {bits} (need 16)")));
    }
    let data = data.ok_or_else(|| input_err("WAV file has no data chunk"))?;
    let samples: Vec<i16> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    AudioBuffer::new(samples, rate)
}

pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_wav(audio))?;
    Ok(())
}

pub fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let data_len = audio.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in &audio.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}
