//! RIFF/WAVE reading and writing for 16-bit linear PCM.

use crate::error::{Error, Result};

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcmAudio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl PcmAudio {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        PcmAudio {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate.max(1) as f64
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct Format {
    channels: u16,
    sample_rate: u32,
}

/// Parse a 16-bit PCM WAV. Samples are scaled by 1/32768 into `[-1, 1)`;
/// multi-channel frames are averaged to mono.
pub fn read_wav(bytes: &[u8]) -> Result<PcmAudio> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut format: Option<Format> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let end = end.ok_or_else(|| Error::Wav("truncated fmt chunk".into()))?;
                if size < 16 {
                    return Err(Error::Wav(format!("fmt chunk too short ({size} bytes)")));
                }
                let fmt = &bytes[body..end];
                let code = u16_at(fmt, 0);
                let channels = u16_at(fmt, 2);
                let sample_rate = u32_at(fmt, 4);
                let bits = u16_at(fmt, 14);
                if code != 1 {
                    return Err(Error::Wav(format!(
                        "unsupported compression: format code {code} (only PCM code 1)"
                    )));
                }
                if bits != 16 {
                    return Err(Error::Wav(format!(
                        "unsupported bit depth {bits} (only 16-bit)"
                    )));
                }
                if channels == 0 {
                    return Err(Error::Wav("zero channels".into()));
                }
                format = Some(Format {
                    channels,
                    sample_rate,
                });
            }
            b"data" => {
                let fmt = format.ok_or_else(|| Error::Wav("data chunk before fmt chunk".into()))?;
                // Tolerate writers that leave the data size as a placeholder.
                let end = end.unwrap_or(bytes.len());
                let data = &bytes[body..end];
                let ch = fmt.channels as usize;
                let frame = 2 * ch;
                let frames = data.len() / frame;
                let mut samples = Vec::with_capacity(frames);
                for f in 0..frames {
                    let mut acc = 0.0f64;
                    for c in 0..ch {
                        let at = f * frame + 2 * c;
                        acc += f64::from(i16::from_le_bytes([data[at], data[at + 1]]));
                    }
                    samples.push((acc / ch as f64 / 32768.0) as f32);
                }
                return Ok(PcmAudio {
                    samples,
                    sample_rate: fmt.sample_rate,
                });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(Error::Wav("no data chunk".into()))
}

/// Quantize one sample: saturating `round(x·32768)`, so that samples read
/// from a 16-bit file convert back to the identical integer.
pub fn sample_to_i16(x: f32) -> i16 {
    let x = f64::from(x).clamp(-1.0, 1.0);
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encode mono 16-bit little-endian PCM in a canonical 44-byte-header RIFF.
pub fn write_wav(audio: &PcmAudio) -> Vec<u8> {
    let data_len = (audio.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &audio.samples {
        out.extend_from_slice(&sample_to_i16(s).to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm16(channels: u16, rate: u32, samples: &[i16]) -> Vec<u8> {
        let data_len = (samples.len() * 2) as u32;
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data_len).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        b.extend_from_slice(&(2 * channels).to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&data_len.to_le_bytes());
        for s in samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    #[test]
    fn reads_scaled_samples() {
        let a = read_wav(&pcm16(1, 16000, &[0, 16384, -32768])).unwrap();
        assert_eq!(a.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(a.sample_rate, 16000);
    }

    #[test]
    fn stereo_is_averaged() {
        let a = read_wav(&pcm16(2, 8000, &[16384, -16384])).unwrap();
        assert_eq!(a.samples, vec![0.0]);
    }

    #[test]
    fn write_endpoints() {
        assert_eq!(sample_to_i16(0.0), 0);
        assert_eq!(sample_to_i16(1.0), 32767);
        assert_eq!(sample_to_i16(-1.0), -32768);
        assert_eq!(sample_to_i16(3.0), 32767);
    }

    #[test]
    fn rejects_unsupported_formats() {
        let mut b = pcm16(1, 16000, &[1, 2]);
        b[20] = 3; // IEEE float
        assert!(read_wav(&b)
            .unwrap_err()
            .to_string()
            .contains("compression"));
        let mut b = pcm16(1, 16000, &[1, 2]);
        b[34] = 24;
        assert!(read_wav(&b).unwrap_err().to_string().contains("bit depth"));
        assert!(read_wav(b"RIFX1234WAVE").is_err());
        assert!(read_wav(&pcm16(1, 16000, &[])[..36]).is_err());
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = pcm16(1, 16000, &[7, -7]);
        let mut b = plain[..12].to_vec();
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]); // odd size plus pad byte
        b.extend_from_slice(&plain[12..]);
        assert_eq!(read_wav(&b).unwrap(), read_wav(&plain).unwrap());
    }
}
