use std::fs;
use std::path::Path;

use super::AudioClip;
use crate::error::{KwsError, Result};

const PCM_SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM mono WAV file as a one-second clip.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| KwsError::io(path, e))?;
    decode_wav(&bytes)
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes an in-memory RIFF/WAVE buffer.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(KwsError::Format("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        // Streaming writers may leave the data size unset; clamp to the file.
        let body_end = body_start.saturating_add(size).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(KwsError::Format("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((u16_at(body, 0), u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => {
                data = Some(body);
                break;
            }
            _ => {}
        }
        pos = body_start.saturating_add(size).saturating_add(size & 1);
    }
    let (format, channels, sample_rate, bits) = fmt.ok_or_else(|| KwsError::Format("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| KwsError::Format("no data chunk".into()))?;
    if format != 1 {
        return Err(KwsError::Unsupported(format!("audio format {format} (only PCM = 1)")));
    }
    if channels != 1 {
        return Err(KwsError::Unsupported(format!("{channels} channels (only mono)")));
    }
    if bits != 16 {
        return Err(KwsError::Unsupported(format!("{bits} bits per sample (only 16)")));
    }
    if sample_rate == 0 {
        return Err(KwsError::Format("sample rate 0".into()));
    }
    let cap = sample_rate as usize;
    let samples = data
        .chunks_exact(2)
        .take(cap)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / PCM_SCALE)
        .collect();
    AudioClip::new(samples, sample_rate, None)
}

/// Encodes a clip as 16-bit PCM mono WAV bytes.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let n = clip.len();
    let data_len = (n * 2) as u32;
    let sr = clip.sample_rate();
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sr.to_le_bytes());
    out.extend_from_slice(&(sr * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in clip.samples() {
        let q = (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip)).map_err(|e| KwsError::io(path, e))
}
