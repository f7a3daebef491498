//! Inverse STFT and Griffin-Lim phase reconstruction.

use crate::dsp::stft::frame_window;
use crate::dsp::{stft, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng;
use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;

/// Least-squares inverse STFT: per-frame inverse FFT, Hann-weighted
/// overlap-add, normalized by the summed squared window.
///
/// Returns `(frames - 1) * hop` samples, the region corresponding to the
/// unpadded input of the forward transform. Callers that know the original
/// length truncate.
pub fn istft_with_phase(complex: &Mat<Complex64>, cfg: &StftConfig) -> Result<Waveform> {
    cfg.validate()?;
    let bins = cfg.bins();
    if complex.rows != bins {
        return Err(Error::Domain(format!(
            "expected {} bins, got {}",
            bins, complex.rows
        )));
    }
    let frames = complex.cols;
    if frames == 0 {
        return Err(Error::Domain("empty spectrogram".into()));
    }

    let n_fft = cfg.n_fft;
    let window = frame_window(cfg);
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n_fft);

    let full_len = (frames - 1) * cfg.hop + n_fft;
    let mut acc = vec![0.0f64; full_len];
    let mut norm = vec![0.0f64; full_len];
    let mut buf = vec![Complex64::default(); n_fft];

    for t in 0..frames {
        // Rebuild the two-sided spectrum from the one-sided bins.
        for b in 0..bins {
            buf[b] = complex.get(b, t);
        }
        for b in bins..n_fft {
            buf[b] = complex.get(n_fft - b, t).conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for i in 0..n_fft {
            let x = buf[i].re / n_fft as f64;
            acc[start + i] += window[i] * x;
            norm[start + i] += window[i] * window[i];
        }
    }

    let left = n_fft / 2;
    let out_len = (frames - 1) * cfg.hop;
    let samples = (0..out_len)
        .map(|i| {
            let d = norm[left + i];
            if d > 1e-12 {
                acc[left + i] / d
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform::new(samples, cfg.sample_rate))
}

/// Result of a magnitude-only reconstruction.
#[derive(Debug, Clone)]
pub struct GriffinLimResult {
    pub waveform: Waveform,
    /// Spectral-convergence error `||_STFT(x_t)| - mag||_F` per iteration;
    /// empty when a true phase was supplied.
    pub error_trace: Vec<f64>,
}

/// Reconstruct a waveform from a `bins x frames` power matrix.
///
/// With `phase` supplied this is a single inverse STFT using the phase's
/// angles with magnitudes `sqrt(power)`. Otherwise Griffin-Lim runs for
/// `iters` iterations starting from seeded uniform random phase.
pub fn reconstruct(
    power: &Mat<f64>,
    cfg: &StftConfig,
    phase: Option<&Mat<Complex64>>,
    iters: usize,
    seed: u64,
) -> Result<GriffinLimResult> {
    cfg.validate()?;
    if power.data.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Domain(
            "power matrix must be nonnegative and finite".into(),
        ));
    }
    let mag = power.map(f64::sqrt);

    if let Some(ph) = phase {
        if ph.rows != power.rows || ph.cols != power.cols {
            return Err(Error::Domain(format!(
                "phase shape {}x{} does not match power {}x{}",
                ph.rows, ph.cols, power.rows, power.cols
            )));
        }
        let mut complex = Mat::<Complex64>::zeros(power.rows, power.cols);
        for i in 0..complex.data.len() {
            let p = ph.data[i];
            let unit = if p.norm() > 1e-300 {
                p / p.norm()
            } else {
                Complex64::new(1.0, 0.0)
            };
            complex.data[i] = unit * mag.data[i];
        }
        let waveform = istft_with_phase(&complex, cfg)?;
        return Ok(GriffinLimResult {
            waveform,
            error_trace: Vec::new(),
        });
    }

    // Griffin-Lim: unit random initial phase, then alternate inverse/forward
    // STFT with magnitude replacement.
    let mut rng = rng::stream(seed, "griffin-lim", 0);
    let mut estimate = Mat::<Complex64>::zeros(power.rows, power.cols);
    for i in 0..estimate.data.len() {
        let theta: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        estimate.data[i] = Complex64::from_polar(mag.data[i], theta);
    }

    let mut trace = Vec::with_capacity(iters);
    let mut wave = istft_with_phase(&estimate, cfg)?;
    for _ in 0..iters {
        let rebuilt = stft(&wave, cfg)?;
        let mut err = 0.0;
        for i in 0..estimate.data.len() {
            let d = rebuilt.complex.data[i].norm() - mag.data[i];
            err += d * d;
            let unit = if rebuilt.complex.data[i].norm() > 1e-300 {
                rebuilt.complex.data[i] / rebuilt.complex.data[i].norm()
            } else {
                Complex64::new(1.0, 0.0)
            };
            estimate.data[i] = unit * mag.data[i];
        }
        trace.push(err.sqrt());
        wave = istft_with_phase(&estimate, cfg)?;
    }

    Ok(GriffinLimResult {
        waveform: wave,
        error_trace: trace,
    })
}
