//! Signal I/O, STFT analysis, mel features, and Griffin-Lim reconstruction.
//!
//! All operations here are pure functions of their inputs and hold no shared
//! mutable state; waveforms and spectrograms are carried in `f64` and only
//! narrowed to `f32` at the model boundary and in cache files.

mod cache;
mod griffin;
mod mel;
mod resize;
mod stft;
mod wav;

pub use cache::{read_power_cache, write_power_cache};
pub use griffin::{istft_with_phase, reconstruct, GriffinLimResult};
pub use mel::mel_features;
pub use resize::resize_square;
pub use stft::{hann_window, stft};
pub use wav::{wav_read, wav_write};

use crate::error::{Error, Result};
use crate::mat::Mat;
use num_complex::Complex64;
use std::path::PathBuf;

/// Mono PCM sample sequence.
#[derive(Debug, Clone)]
pub struct Waveform {
    /// Amplitudes, nominally in `[-1, 1]`.
    pub samples: Vec<f64>,
    /// Sample rate in Hz.
    pub sample_rate: u32,
    /// Where the samples came from, when read from disk.
    pub source_path: Option<PathBuf>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
            source_path: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Scale so the peak magnitude is at most 1.0. No-op for quieter signals.
    pub fn normalize(&mut self) {
        let peak = self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if peak > 1.0 {
            for s in &mut self.samples {
                *s /= peak;
            }
        }
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.samples.iter().all(|s| s.is_finite()) {
            Ok(())
        } else {
            Err(Error::Domain("waveform contains non-finite samples".into()))
        }
    }
}

/// Analysis window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Window {
    Hann,
}

/// Boundary padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Reflect,
}

/// STFT analysis parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win_len: usize,
    pub window: Window,
    pub padding: Padding,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            n_fft: 2048,
            hop: 512,
            win_len: 2048,
            window: Window::Hann,
            padding: Padding::Reflect,
            sample_rate: 22050,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop <= self.win_len && self.win_len <= self.n_fft) {
            return Err(Error::Domain(format!(
                "require hop <= win_len <= n_fft, got {}/{}/{}",
                self.hop, self.win_len, self.n_fft
            )));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(Error::Domain(format!(
                "n_fft must be a power of two, got {}",
                self.n_fft
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Domain("sample_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a signal of `len` samples: `1 + ceil(len / hop)`.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len.div_ceil(self.hop)
    }
}

/// Complex STFT matrix plus the derived power matrix.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// `bins x frames` complex amplitudes.
    pub complex: Mat<Complex64>,
    /// `bins x frames` nonnegative power, `|complex|^2`.
    pub power: Mat<f64>,
    pub config: StftConfig,
    /// Side length of the square model-resolution view.
    pub square_size: usize,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.power.rows
    }

    pub fn frames(&self) -> usize {
        self.power.cols
    }

    /// Square-resized power view at the model resolution.
    pub fn square_power(&self) -> Mat<f64> {
        resize_square(&self.power, self.square_size)
    }
}

/// Log-compressed normalized square view used as GAN model input, together
/// with the scale needed to invert the compression.
#[derive(Debug, Clone)]
pub struct ModelSpectrogram {
    /// `n x n` values in `[0, 1]`: `log1p(power) / log_max`.
    pub data: Mat<f64>,
    /// Peak of `log1p(power)` before normalization.
    pub log_max: f64,
}

impl ModelSpectrogram {
    /// Compress a square power matrix into model space.
    pub fn from_square_power(square: &Mat<f64>) -> Self {
        let logged = square.map(|p| (1.0 + p.max(0.0)).ln());
        let log_max = logged.data.iter().fold(0.0f64, |m, &v| m.max(v));
        let data = if log_max > 0.0 {
            logged.map(|v| v / log_max)
        } else {
            logged
        };
        ModelSpectrogram { data, log_max }
    }

    /// Invert the compression back to a square power matrix.
    pub fn to_square_power(&self) -> Mat<f64> {
        self.data
            .map(|v| ((v * self.log_max).exp() - 1.0).max(0.0))
    }
}

#[cfg(test)]
mod tests;
