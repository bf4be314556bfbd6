use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

pub const TARGET_RATE: u32 = 16_000;

/// Mono waveform at 16 kHz, samples in [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Read a RIFF PCM16 WAV file: stereo is averaged to mono, other rates are
/// linearly resampled to 16 kHz.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path)?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (audio_format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(Error::format("truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("short fmt chunk"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    let (audio_format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::format("missing fmt chunk"))?;
    let data = data.ok_or_else(|| Error::format("missing data chunk"))?;
    if audio_format != 1 || bits != 16 {
        return Err(Error::format(format!(
            "unsupported codec: format {audio_format}, {bits}-bit (PCM16 only)"
        )));
    }
    if channels == 0 || channels > 2 {
        return Err(Error::format(format!("unsupported channel count {channels}")));
    }

    let ch = channels as usize;
    let n_frames = data.len() / (2 * ch);
    let mut samples = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut acc = 0.0;
        for c in 0..ch {
            let off = (f * ch + c) * 2;
            let s = i16::from_le_bytes(data[off..off + 2].try_into().unwrap());
            acc += s as f64 / 32768.0;
        }
        samples.push(acc / ch as f64);
    }
    if samples.is_empty() {
        return Err(Error::format("empty audio data"));
    }

    let samples = if rate == TARGET_RATE {
        samples
    } else {
        resample_linear(&samples, rate, TARGET_RATE)
    };
    Ok(Waveform {
        samples,
        sample_rate: TARGET_RATE,
    })
}

/// Linear-interpolation resampler mapping the first and last input samples
/// onto the first and last output samples.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.len() < 2 {
        return samples.to_vec();
    }
    let out_len = ((samples.len() - 1) as u64 * to as u64 / from as u64) as usize + 1;
    let step = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            if i0 + 1 < samples.len() {
                samples[i0] * (1.0 - frac) + samples[i0 + 1] * frac
            } else {
                samples[samples.len() - 1]
            }
        })
        .collect()
}

/// Encode samples as a mono PCM16 WAV byte buffer (test and tooling helper).
pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    encode_wav_multi(&[samples.to_vec()], sample_rate)
}

pub fn encode_wav_multi(channels: &[Vec<f64>], sample_rate: u32) -> Vec<u8> {
    let ch = channels.len() as u16;
    let n = channels[0].len();
    let data_len = n * ch as usize * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&ch.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * ch as u32 * 2).to_le_bytes());
    out.extend_from_slice(&(ch * 2).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..n {
        for c in channels {
            let v = (c[i].clamp(-1.0, 1.0) * 32767.0).round() as i16;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_of_silence() {
        let bytes = encode_wav(&vec![0.0; 16000], 16000);
        let w = decode_wav(&bytes).unwrap();
        assert_eq!(w.samples.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
        assert_eq!(w.sample_rate, 16000);
    }

    #[test]
    fn opposite_stereo_channels_cancel() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 / 100.0).sin() * 0.5).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let bytes = encode_wav_multi(&[x, neg], 16000);
        let w = decode_wav(&bytes).unwrap();
        // +/- one LSB of PCM16 quantization
        assert!(w.samples.iter().all(|s| s.abs() <= 1.0 / 32767.0));
    }

    #[test]
    fn upsampling_8k_doubles_length() {
        let n = 1000;
        let samples: Vec<f64> = (0..n).map(|i| (i as f64 * 0.01).sin() * 0.3).collect();
        let bytes = encode_wav(&samples, 8000);
        let w = decode_wav(&bytes).unwrap();
        let expected = 2 * n - 1;
        assert!((w.samples.len() as i64 - expected as i64).abs() <= 1);
    }

    #[test]
    fn malformed_header_rejected() {
        assert!(decode_wav(b"NOTAWAVEFILE").is_err());
    }

    #[test]
    fn unsupported_codec_rejected() {
        let mut bytes = encode_wav(&vec![0.1; 10], 16000);
        // flip audio format to 3 (IEEE float)
        bytes[20] = 3;
        assert!(decode_wav(&bytes).is_err());
    }
}
