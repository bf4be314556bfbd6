use crate::frontend::mel::MelSpectrogram;
use crate::tensor::Matrix;

/// Non-overlapping spectrogram patches flattened into a token sequence,
/// ordered frequency-major then time. Each token row is a patch flattened
/// row-major as patch_h (freq) x patch_w (time).
#[derive(Clone, Debug)]
pub struct PatchSequence {
    pub tokens: usize,
    pub patch_dim: usize,
    /// tokens x patch_dim
    pub values: Matrix,
    /// (freq_patches, time_patches)
    pub grid: (usize, usize),
    pub patch_h: usize,
    pub patch_w: usize,
    /// padded spectrogram dims (freq, time), for exact reconstruction
    pub padded: (usize, usize),
}

/// Split a spectrogram (viewed as mel_bins x frames) into patch_h x patch_w
/// patches, zero-padding both dims up to patch multiples.
pub fn patchify(mel: &MelSpectrogram, patch_h: usize, patch_w: usize) -> PatchSequence {
    let freq = mel.mel_bins;
    let time = mel.frames;
    let freq_pad = freq.div_ceil(patch_h) * patch_h;
    let time_pad = time.div_ceil(patch_w) * patch_w;
    let fp = freq_pad / patch_h;
    let tp = time_pad / patch_w;
    let tokens = fp * tp;
    let patch_dim = patch_h * patch_w;
    let mut values = Matrix::zeros(tokens, patch_dim);
    for pf in 0..fp {
        for pt in 0..tp {
            let token = pf * tp + pt;
            for dh in 0..patch_h {
                for dw in 0..patch_w {
                    let f_bin = pf * patch_h + dh;
                    let t_frame = pt * patch_w + dw;
                    // mel values are stored frame-major; out-of-range reads
                    // are the zero padding
                    let v = if f_bin < freq && t_frame < time {
                        mel.values.get(t_frame, f_bin)
                    } else {
                        0.0
                    };
                    values.data[token * patch_dim + dh * patch_w + dw] = v;
                }
            }
        }
    }
    PatchSequence {
        tokens,
        patch_dim,
        values,
        grid: (fp, tp),
        patch_h,
        patch_w,
        padded: (freq_pad, time_pad),
    }
}

/// Reassemble the padded spectrogram (freq x time) from a patch sequence.
pub fn unpatchify(seq: &PatchSequence) -> Matrix {
    let (freq_pad, time_pad) = seq.padded;
    let (fp, tp) = seq.grid;
    let mut out = Matrix::zeros(freq_pad, time_pad);
    for pf in 0..fp {
        for pt in 0..tp {
            let token = pf * tp + pt;
            for dh in 0..seq.patch_h {
                for dw in 0..seq.patch_w {
                    let v = seq.values.data[token * seq.patch_dim + dh * seq.patch_w + dw];
                    out.set(pf * seq.patch_h + dh, pt * seq.patch_w + dw, v);
                }
            }
        }
    }
    out
}
