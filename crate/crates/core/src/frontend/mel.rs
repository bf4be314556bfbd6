use crate::error::{Error, Result};
use crate::frontend::wav::Waveform;
use crate::tensor::Matrix;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

/// Frontend defaults: 25 ms Hann window, 10 ms hop, 128 mel bins at 16 kHz.
#[derive(Clone, Debug)]
pub struct FrontendConfig {
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub floor: f64,
    pub sample_rate: u32,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            win: 400,
            hop: 160,
            n_mels: 128,
            floor: 1e-10,
            sample_rate: 16_000,
        }
    }
}

/// Log-mel energies, one row per frame.
#[derive(Clone, Debug)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub mel_bins: usize,
    /// frames x mel_bins
    pub values: Matrix,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over `n_bins` DFT bins (0..nyquist).
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Matrix {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f < mid {
                (f - lo) / (mid - lo)
            } else if f >= mid && f < hi {
                (hi - f) / (hi - mid)
            } else if (f - mid).abs() < 1e-12 {
                1.0
            } else {
                0.0
            };
            fb.data[m * n_bins + b] = w;
        }
    }
    fb
}

/// Power spectrum of one windowed frame by direct DFT, O(n^2). This is the
/// correctness oracle form; desk-scale inputs keep it fast enough.
pub fn frame_power_spectrum(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let n_bins = n / 2 + 1;
    let mut power = vec![0.0; n_bins];
    for (k, p) in power.iter_mut().enumerate() {
        let mut re = 0.0;
        let mut im = 0.0;
        for (t, &x) in frame.iter().enumerate() {
            let ang = -2.0 * PI * k as f64 * t as f64 / n as f64;
            re += x * ang.cos();
            im += x * ang.sin();
        }
        *p = re * re + im * im;
    }
    power
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// frames = 1 + floor((len - win) / hop); values = ln(melfb . |DFT|^2 + floor).
pub fn log_mel(wave: &Waveform, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    if wave.samples.len() < cfg.win {
        return Err(Error::validation(format!(
            "waveform length {} shorter than window {}",
            wave.samples.len(),
            cfg.win
        )));
    }
    let frames = 1 + (wave.samples.len() - cfg.win) / cfg.hop;
    let window = hann_window(cfg.win);
    let fb = mel_filterbank(cfg.n_mels, cfg.win, cfg.sample_rate);
    let n_bins = cfg.win / 2 + 1;
    let mut values = Matrix::zeros(frames, cfg.n_mels);
    let mut frame_buf = vec![0.0; cfg.win];
    for f in 0..frames {
        let start = f * cfg.hop;
        for i in 0..cfg.win {
            frame_buf[i] = wave.samples[start + i] * window[i];
        }
        let power = frame_power_spectrum(&frame_buf);
        for m in 0..cfg.n_mels {
            let mut e = 0.0;
            for b in 0..n_bins {
                e += fb.data[m * n_bins + b] * power[b];
            }
            values.data[f * cfg.n_mels + m] = (e + cfg.floor).ln();
        }
    }
    Ok(MelSpectrogram {
        frames,
        mel_bins: cfg.n_mels,
        values,
    })
}

const MELS_MAGIC: &[u8; 4] = b"MELS";

/// Dump as the headered little-endian binary: magic "MELS", u32 frames,
/// u32 bins, f32 data (frame-major).
pub fn dump_mels(mel: &MelSpectrogram, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(MELS_MAGIC)?;
    f.write_all(&(mel.frames as u32).to_le_bytes())?;
    f.write_all(&(mel.mel_bins as u32).to_le_bytes())?;
    for v in &mel.values.data {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn load_mels(path: &Path) -> Result<MelSpectrogram> {
    let mut f = std::fs::File::open(path)?;
    let mut header = [0u8; 12];
    f.read_exact(&mut header)?;
    if &header[0..4] != MELS_MAGIC {
        return Err(Error::format("bad MELS magic"));
    }
    let frames = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let bins = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() != frames * bins * 4 {
        return Err(Error::format("MELS payload size mismatch"));
    }
    let data: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(MelSpectrogram {
        frames,
        mel_bins: bins,
        values: Matrix::from_vec(frames, bins, data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform {
            samples,
            sample_rate: 16_000,
        }
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let cfg = FrontendConfig::default();
        let mel = log_mel(&wave(vec![0.0; 16_000]), &cfg).unwrap();
        for v in &mel.values.data {
            assert!((v - cfg.floor.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn one_second_frame_count() {
        let cfg = FrontendConfig::default();
        let mel = log_mel(&wave(vec![0.0; 16_000]), &cfg).unwrap();
        assert_eq!(mel.frames, 98);
    }

    #[test]
    fn sine_peaks_in_bin_containing_440hz() {
        let cfg = FrontendConfig::default();
        let samples: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin() * 0.5)
            .collect();
        let mel = log_mel(&wave(samples), &cfg).unwrap();

        // bins whose triangular filter covers 440 Hz
        let fb = mel_filterbank(cfg.n_mels, cfg.win, cfg.sample_rate);
        let n_bins = cfg.win / 2 + 1;
        let dft_bin_440 = (440.0 * cfg.win as f64 / 16_000.0).round() as usize;
        let covering: Vec<usize> = (0..cfg.n_mels)
            .filter(|m| fb.data[m * n_bins + dft_bin_440] > 0.0)
            .collect();
        assert!(!covering.is_empty());

        for f in 0..mel.frames {
            let row = mel.values.row(f);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(
                covering.contains(&argmax),
                "frame {f}: argmax bin {argmax} not among {covering:?}"
            );
        }
    }

    #[test]
    fn too_short_wave_rejected() {
        let cfg = FrontendConfig::default();
        assert!(log_mel(&wave(vec![0.0; 100]), &cfg).is_err());
    }

    #[test]
    fn hop_shift_moves_frames_by_one() {
        let cfg = FrontendConfig::default();
        let base: Vec<f64> = (0..4000)
            .map(|i| ((i * 7 % 101) as f64 / 101.0 - 0.5) * 0.8)
            .collect();
        let mel_a = log_mel(&wave(base.clone()), &cfg).unwrap();
        let shifted: Vec<f64> = base[cfg.hop..].to_vec();
        let mel_b = log_mel(&wave(shifted), &cfg).unwrap();
        assert_eq!(mel_b.frames, mel_a.frames - 1);
        for f in 0..mel_b.frames {
            for m in 0..cfg.n_mels {
                let a = mel_a.values.get(f + 1, m);
                let b = mel_b.values.get(f, m);
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mels_dump_roundtrip() {
        let cfg = FrontendConfig {
            n_mels: 8,
            ..Default::default()
        };
        let samples: Vec<f64> = (0..1200).map(|i| (i as f64 * 0.01).sin() * 0.4).collect();
        let mel = log_mel(&wave(samples), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mels");
        dump_mels(&mel, &path).unwrap();
        let back = load_mels(&path).unwrap();
        assert_eq!(back.frames, mel.frames);
        assert_eq!(back.mel_bins, mel.mel_bins);
        // f32 storage precision
        assert!(back.values.max_abs_diff(&mel.values) < 1e-5);
    }
}
