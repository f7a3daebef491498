//! Short-time Fourier analysis with a Hann window and reflect padding.

use crate::dsp::{Spectrogram, StftConfig, Waveform, Window};
use crate::error::{Error, Result};
use crate::mat::Mat;
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Reflect-pad (edge sample not repeated), bouncing when the pad exceeds the
/// signal length.
fn reflect_index(i: isize, len: isize) -> usize {
    debug_assert!(len > 0);
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut j = i.rem_euclid(period);
    if j >= len {
        j = period - j;
    }
    j as usize
}

/// Frame layout for a signal of `len` samples under `cfg`: reflect padding of
/// `n_fft/2` on the left and enough on the right that exactly
/// `1 + ceil(len/hop)` full frames fit.
pub(crate) fn padded_signal(samples: &[f64], cfg: &StftConfig) -> Vec<f64> {
    let len = samples.len();
    let frames = cfg.frames_for(len);
    let padded_len = (frames - 1) * cfg.hop + cfg.n_fft;
    let left = cfg.n_fft / 2;
    let n = len as isize;
    (0..padded_len)
        .map(|p| samples[reflect_index(p as isize - left as isize, n)])
        .collect()
}

/// Window placed centered inside an `n_fft` frame (zero-padded when
/// `win_len < n_fft`).
pub(crate) fn frame_window(cfg: &StftConfig) -> Vec<f64> {
    let base = match cfg.window {
        Window::Hann => hann_window(cfg.win_len),
    };
    if cfg.win_len == cfg.n_fft {
        return base;
    }
    let mut w = vec![0.0; cfg.n_fft];
    let off = (cfg.n_fft - cfg.win_len) / 2;
    w[off..off + cfg.win_len].copy_from_slice(&base);
    w
}

/// Compute the one-sided STFT of a waveform.
///
/// Frame `t`, bin `b` holds the DFT of the Hann-windowed frame starting at
/// `t * hop` in the padded signal; the power matrix is the squared magnitude.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    w.assert_finite()?;
    if w.samples.is_empty() {
        return Err(Error::Domain("cannot STFT an empty signal".into()));
    }

    let padded = padded_signal(&w.samples, cfg);
    let window = frame_window(cfg);
    let frames = cfg.frames_for(w.len());
    let bins = cfg.bins();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex64::default(); cfg.n_fft];

    let mut complex = Mat::<Complex64>::zeros(bins, frames);
    let mut power = Mat::<f64>::zeros(bins, frames);
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            complex.set(b, t, buf[b]);
            power.set(b, t, buf[b].norm_sqr());
        }
    }

    Ok(Spectrogram {
        complex,
        power,
        config: *cfg,
        square_size: 64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_bounces() {
        // signal [a b c d]: index -1 -> b, -2 -> c, 4 -> c, 5 -> b
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(-2, 4), 2);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(5, 4), 1);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn hann_is_periodic_form() {
        let w = hann_window(8);
        assert!(w[0].abs() < 1e-15);
        assert!((w[4] - 1.0).abs() < 1e-15);
    }
}
