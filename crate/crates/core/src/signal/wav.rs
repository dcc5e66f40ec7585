//! 16-bit PCM mono RIFF/WAVE reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const PCM: u16 = 1;

/// Reads a 16-bit PCM mono file, scaling samples by `1/32768`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Tensor, u32)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (samples, rate) = decode_wav(&bytes)?;
    if samples.is_empty() {
        return Err(Error::Wav(format!("{}: no samples", path.display())));
    }
    Ok((Tensor::from_vec(samples), rate))
}

/// Writes `wave` as 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, wave: &Tensor, sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(wave.data(), sample_rate)).map_err(|e| Error::io(path, e))
}

/// Rounds half away from zero and clips to the int16 range.
pub fn quantize(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_wav(bytes: &[u8]) -> Result<(Vec<f64>, u32)> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav("missing RIFF/WAVE magic".into()));
    }
    let mut pos = 12;
    let mut rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + len > bytes.len() {
            return Err(Error::Wav(format!(
                "chunk `{}` overruns the file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(Error::Wav("fmt chunk too short".into()));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let bits = u16_at(bytes, body + 14);
                if format != PCM {
                    return Err(Error::Wav(format!("audio format {format} is not PCM")));
                }
                if channels != 1 {
                    return Err(Error::Wav(format!("{channels} channels, expected mono")));
                }
                if bits != 16 {
                    return Err(Error::Wav(format!("{bits}-bit samples, expected 16-bit")));
                }
                rate = Some(u32_at(bytes, body + 4));
            }
            b"data" => {
                let rate = rate.ok_or_else(|| Error::Wav("data chunk before fmt chunk".into()))?;
                let samples = bytes[body..body + len - len % 2]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok((samples, rate));
            }
            _ => {}
        }
        pos = body + len + len % 2;
    }
    Err(Error::Wav("no data chunk".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let b = encode_wav(&[0.0, 0.5], 16_000);
        assert_eq!(&b[0..4], b"RIFF");
        assert_eq!(&b[8..12], b"WAVE");
        assert_eq!(&b[12..16], b"fmt ");
        assert_eq!(u32_at(&b, 16), 16);
        assert_eq!(u16_at(&b, 20), 1);
        assert_eq!(u16_at(&b, 22), 1);
        assert_eq!(u32_at(&b, 24), 16_000);
        assert_eq!(u16_at(&b, 34), 16);
        assert_eq!(&b[36..40], b"data");
        assert_eq!(u32_at(&b, 40), 4);
        assert_eq!(b.len(), 48);
    }

    #[test]
    fn quantization_rounds_half_away_and_clips() {
        assert_eq!(quantize(0.5 / 32768.0), 1);
        assert_eq!(quantize(-0.5 / 32768.0), -1);
        assert_eq!(quantize(1.0), i16::MAX);
        assert_eq!(quantize(-2.0), i16::MIN);
    }

    #[test]
    fn silence_round_trip() {
        let (s, r) = decode_wav(&encode_wav(&[0.0; 10], 16_000)).unwrap();
        assert_eq!(r, 16_000);
        assert_eq!(s, vec![0.0; 10]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut b = encode_wav(&[0.1], 16_000);
        b[0] = b'X';
        assert!(decode_wav(&b).unwrap_err().to_string().contains("magic"));

        let mut b = encode_wav(&[0.1], 16_000);
        b[20] = 3; // IEEE float
        assert!(decode_wav(&b).unwrap_err().to_string().contains("not PCM"));

        let mut b = encode_wav(&[0.1], 16_000);
        b[22] = 2;
        assert!(decode_wav(&b).unwrap_err().to_string().contains("mono"));
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = encode_wav(&[0.25, -0.25], 8_000);
        let mut b = plain[..36].to_vec();
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(&plain[36..]);
        let (s, r) = decode_wav(&b).unwrap();
        assert_eq!(r, 8_000);
        assert_eq!(s, vec![0.25, -0.25]);
    }
}
