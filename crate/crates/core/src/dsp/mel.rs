//! Triangular mel filterbank features (HTK mel scale) for the toy victim.

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::mat::Mat;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Peak-one triangular filters on `n_mels` HTK-mel-spaced centers covering
/// `[0, sr/2]`, as an `n_mels x bins` weight matrix.
pub fn mel_filterbank(n_mels: usize, bins: usize, n_fft: usize, sample_rate: u32) -> Mat<f64> {
    let nyquist = f64::from(sample_rate) / 2.0;
    let mel_max = hz_to_mel(nyquist);
    // n_mels + 2 edge points define n_mels triangles
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins)
        .map(|b| f64::from(sample_rate) * b as f64 / n_fft as f64)
        .collect();

    let mut fb = Mat::<f64>::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = bin_hz[b];
            let w = if f > lo && f < center {
                (f - lo) / (center - lo)
            } else if (f - center).abs() < 1e-12 {
                1.0
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb.set(m, b, w);
        }
    }
    fb
}

/// Apply the mel filterbank to the power matrix, then `log(1 + x)`.
///
/// Returns an `n_mels x frames` matrix.
pub fn mel_features(s: &Spectrogram, n_mels: usize) -> Result<Mat<f64>> {
    let bins = s.bins();
    if n_mels == 0 {
        return Err(Error::Domain("n_mels must be at least 1".into()));
    }
    if n_mels >= bins {
        return Err(Error::Domain(format!(
            "n_mels ({n_mels}) must be less than bin count ({bins})"
        )));
    }
    let fb = mel_filterbank(n_mels, bins, s.config.n_fft, s.config.sample_rate);
    let frames = s.frames();
    let mut out = Mat::<f64>::zeros(n_mels, frames);
    for m in 0..n_mels {
        for t in 0..frames {
            let mut acc = 0.0;
            for b in 0..bins {
                acc += fb.get(m, b) * s.power.get(b, t);
            }
            out.set(m, t, (1.0 + acc).ln());
        }
    }
    Ok(out)
}
