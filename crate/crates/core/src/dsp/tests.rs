use super::*;
use crate::rng;
use approx::assert_relative_eq;
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::PI;

fn small_cfg() -> StftConfig {
    StftConfig {
        n_fft: 256,
        hop: 64,
        win_len: 256,
        ..StftConfig::default()
    }
}

fn write_wav_raw(path: &std::path::Path, channels: u16, rate: u32, pcm: &[i16]) {
    let mut out = Vec::new();
    let data_len = (pcm.len() * 2) as u32;
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * u32::from(channels) * 2).to_le_bytes());
    out.extend_from_slice(&(channels * 2).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in pcm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::write(path, out).unwrap();
}

#[test]
fn wav_read_mono_16bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mono.wav");
    let pcm: Vec<i16> = (0..22050).map(|i| (i % 100) as i16).collect();
    write_wav_raw(&path, 1, 22050, &pcm);
    let w = wav_read(&path).unwrap();
    assert_eq!(w.len(), 22050);
    assert_eq!(w.sample_rate, 22050);
}

#[test]
fn wav_read_opposite_stereo_cancels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stereo.wav");
    let mut pcm = Vec::new();
    for i in 0..500i16 {
        pcm.push(i * 7);
        pcm.push(-(i * 7));
    }
    write_wav_raw(&path, 2, 22050, &pcm);
    let w = wav_read(&path).unwrap();
    assert!(w.samples.iter().all(|&s| s == 0.0));
}

#[test]
fn wav_sample_scaling_oracle() {
    // 16384 / 32768 = 0.5 by the integer-scaling rule
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.wav");
    write_wav_raw(&path, 1, 22050, &[16384]);
    let w = wav_read(&path).unwrap();
    assert_relative_eq!(w.samples[0], 0.5, epsilon = 1e-4);
}

#[test]
fn wav_round_trip_quantization_bound() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rt.wav");
    let mut r = rng::stream(1, "wav-test", 0);
    let samples: Vec<f64> = (0..4096).map(|_| r.gen_range(-1.0..1.0)).collect();
    let w = Waveform::new(samples.clone(), 22050);
    let clipped = wav_write(&w, &path).unwrap();
    assert_eq!(clipped, 0);
    let back = wav_read(&path).unwrap();
    let max_err = samples
        .iter()
        .zip(&back.samples)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_err <= 1.0 / 32768.0, "max quantization error {max_err}");
}

#[test]
fn wav_write_clips_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.wav");
    let w = Waveform::new(vec![1.5, -2.0, 0.0], 22050);
    let clipped = wav_write(&w, &path).unwrap();
    assert_eq!(clipped, 2);
    let back = wav_read(&path).unwrap();
    assert_relative_eq!(back.samples[0], 32767.0 / 32768.0, epsilon = 1e-9);
    assert_relative_eq!(back.samples[1], -1.0, epsilon = 1e-9);
}

#[test]
fn wav_read_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.wav");
    std::fs::write(&path, b"not a wav file at all").unwrap();
    assert!(matches!(wav_read(&path), Err(Error::Format { .. })));
}

#[test]
fn stft_zero_signal_zero_power() {
    let w = Waveform::new(vec![0.0; 2048], 22050);
    let s = stft(&w, &small_cfg()).unwrap();
    assert!(s.power.data.iter().all(|&p| p == 0.0));
}

#[test]
fn stft_empty_signal_errors() {
    let w = Waveform::new(vec![], 22050);
    assert!(matches!(stft(&w, &small_cfg()), Err(Error::Domain(_))));
}

#[test]
fn stft_frame_count_contract() {
    let cfg = small_cfg();
    let w = Waveform::new(vec![0.1; 1000], 22050);
    let s = stft(&w, &cfg).unwrap();
    assert_eq!(s.frames(), 1 + 1000usize.div_ceil(cfg.hop));
    assert_eq!(s.bins(), cfg.n_fft / 2 + 1);
}

/// Direct DFT of one Hann-windowed frame; the independent oracle for stft.
fn direct_frame_dft(frame: &[f64], window: &[f64], n_fft: usize) -> Vec<Complex64> {
    let bins = n_fft / 2 + 1;
    (0..bins)
        .map(|b| {
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..n_fft {
                let ang = -2.0 * PI * b as f64 * n as f64 / n_fft as f64;
                acc += frame[n] * window[n] * Complex64::new(ang.cos(), ang.sin());
            }
            acc
        })
        .collect()
}

#[test]
fn stft_matches_direct_dft_on_bin_aligned_sinusoid() {
    let cfg = small_cfg();
    let sr = f64::from(cfg.sample_rate);
    let f = 10.0 * sr / cfg.n_fft as f64;
    // cosine with the reflection points on period boundaries, so the padded
    // extension is the same sinusoid and every frame is bin-aligned
    let w = Waveform::new(
        (0..=2048)
            .map(|n| (2.0 * PI * f * n as f64 / sr).cos())
            .collect(),
        cfg.sample_rate,
    );
    let s = stft(&w, &cfg).unwrap();

    let padded = super::stft::padded_signal(&w.samples, &cfg);
    let window = hann_window(cfg.n_fft);
    for t in 0..s.frames() {
        let frame = &padded[t * cfg.hop..t * cfg.hop + cfg.n_fft];
        let oracle = direct_frame_dft(frame, &window, cfg.n_fft);
        let scale: f64 = frame.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
        for b in 0..s.bins() {
            let diff = (s.complex.get(b, t) - oracle[b]).norm();
            assert!(
                diff <= 1e-8 * scale,
                "frame {t} bin {b}: fft/dft diff {diff}"
            );
        }
        // bin 10 carries the peak power in every frame
        let peak_bin = (0..s.bins())
            .max_by(|&a, &b| s.power.get(a, t).total_cmp(&s.power.get(b, t)))
            .unwrap();
        assert_eq!(peak_bin, 10);
    }
}

#[test]
fn parseval_per_frame() {
    let cfg = small_cfg();
    let mut r = rng::stream(7, "parseval", 0);
    let w = Waveform::new((0..1500).map(|_| r.gen_range(-1.0..1.0)).collect(), 22050);
    let s = stft(&w, &cfg).unwrap();
    let padded = super::stft::padded_signal(&w.samples, &cfg);
    let window = hann_window(cfg.n_fft);
    for t in 0..s.frames() {
        let mut spectral = 0.0;
        for b in 0..s.bins() {
            let double = if b == 0 || b == cfg.n_fft / 2 { 1.0 } else { 2.0 };
            spectral += double * s.power.get(b, t);
        }
        let time: f64 = (0..cfg.n_fft)
            .map(|n| {
                let v = padded[t * cfg.hop + n] * window[n];
                v * v
            })
            .sum();
        assert_relative_eq!(spectral, cfg.n_fft as f64 * time, max_relative = 1e-6);
    }
}

#[test]
fn mel_zero_power_is_zero() {
    let w = Waveform::new(vec![0.0; 1024], 22050);
    let s = stft(&w, &small_cfg()).unwrap();
    let m = mel_features(&s, 20).unwrap();
    assert!(m.data.iter().all(|&v| v == 0.0));
}

#[test]
fn mel_rejects_too_many_bands() {
    let w = Waveform::new(vec![0.1; 1024], 22050);
    let s = stft(&w, &small_cfg()).unwrap();
    assert!(mel_features(&s, s.bins()).is_err());
}

#[test]
fn mel_filterbank_row_sums_match_direct_construction() {
    // Independent construction route: accumulate triangle weights per band by
    // scanning bin frequencies directly.
    let cfg = small_cfg();
    let bins = cfg.bins();
    let fb = super::mel::mel_filterbank(20, bins, cfg.n_fft, cfg.sample_rate);

    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let mel_max = mel(f64::from(cfg.sample_rate) / 2.0);
    for band in 0..20 {
        let lo = hz(mel_max * band as f64 / 21.0);
        let ce = hz(mel_max * (band + 1) as f64 / 21.0);
        let hi = hz(mel_max * (band + 2) as f64 / 21.0);
        let mut expect = 0.0;
        for b in 0..bins {
            let f = f64::from(cfg.sample_rate) * b as f64 / cfg.n_fft as f64;
            if f > lo && f < ce {
                expect += (f - lo) / (ce - lo);
            } else if (f - ce).abs() < 1e-12 {
                expect += 1.0;
            } else if f > ce && f < hi {
                expect += (hi - f) / (hi - ce);
            }
        }
        let got: f64 = fb.row(band).iter().sum();
        assert_relative_eq!(got, expect, epsilon = 1e-12);
    }
}

#[test]
fn reconstruct_true_phase_round_trip() {
    let cfg = small_cfg();
    let mut r = rng::stream(3, "roundtrip", 0);
    let samples: Vec<f64> = (0..3001).map(|_| r.gen_range(-0.9..0.9)).collect();
    let w = Waveform::new(samples.clone(), 22050);
    let s = stft(&w, &cfg).unwrap();
    let rec = reconstruct(&s.power, &cfg, Some(&s.complex), 0, 0).unwrap();
    assert!(rec.waveform.len() >= samples.len());
    let err: f64 = samples
        .iter()
        .zip(&rec.waveform.samples)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = samples.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(err / norm < 1e-6, "relative RMS {}", err / norm);
}

#[test]
fn reconstruct_idempotent_on_power() {
    let cfg = small_cfg();
    let mut r = rng::stream(5, "idem", 0);
    let w = Waveform::new((0..2000).map(|_| r.gen_range(-0.5..0.5)).collect(), 22050);
    let s1 = stft(&w, &cfg).unwrap();
    let rec = reconstruct(&s1.power, &cfg, Some(&s1.complex), 0, 0).unwrap();
    let mut trimmed = rec.waveform.clone();
    trimmed.samples.truncate(w.len());
    let s2 = stft(&trimmed, &cfg).unwrap();
    for (a, b) in s1.power.data.iter().zip(&s2.power.data) {
        assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
    }
}

#[test]
fn reconstruct_zero_power_zero_waveform() {
    let cfg = small_cfg();
    let zero = Mat::<f64>::zeros(cfg.bins(), 12);
    let rec = reconstruct(&zero, &cfg, None, 5, 9).unwrap();
    assert!(rec.waveform.samples.iter().all(|&s| s.abs() < 1e-12));
}

#[test]
fn reconstruct_rejects_negative_power() {
    let cfg = small_cfg();
    let mut m = Mat::<f64>::zeros(cfg.bins(), 4);
    m.set(3, 1, -0.5);
    assert!(matches!(
        reconstruct(&m, &cfg, None, 5, 0),
        Err(Error::Domain(_))
    ));
}

#[test]
fn griffin_lim_error_trace_monotone() {
    let cfg = small_cfg();
    let sr = f64::from(cfg.sample_rate);
    let f = 10.0 * sr / cfg.n_fft as f64;
    let w = Waveform::new(
        (0..3000)
            .map(|n| (2.0 * PI * f * n as f64 / sr).sin())
            .collect(),
        cfg.sample_rate,
    );
    let s = stft(&w, &cfg).unwrap();
    for seed in [1u64, 2, 3] {
        let rec = reconstruct(&s.power, &cfg, None, 40, seed).unwrap();
        let trace = &rec.error_trace;
        assert_eq!(trace.len(), 40);
        for t in 1..trace.len() {
            assert!(
                trace[t] <= trace[t - 1] * (1.0 + 1e-6) + 1e-9 * trace[0],
                "seed {seed}: trace rose at {t}: {} -> {}",
                trace[t - 1],
                trace[t]
            );
        }
        assert!(trace[trace.len() - 1] < trace[0]);
    }
}

#[test]
fn resize_preserves_energy_and_nonnegativity() {
    let mut r = rng::stream(11, "resize", 0);
    let src = Mat::from_vec(
        129,
        23,
        (0..129 * 23).map(|_| r.gen_range(0.0..4.0)).collect(),
    );
    let dst = resize_square(&src, 64);
    assert_eq!(dst.rows, 64);
    assert_eq!(dst.cols, 64);
    assert!(dst.data.iter().all(|&v| v >= 0.0));
    let ratio = dst.sum() / src.sum();
    assert!((ratio - 1.0).abs() < 0.02, "energy ratio {ratio}");
}

#[test]
fn model_spectrogram_round_trip() {
    let mut r = rng::stream(13, "model", 0);
    let square = Mat::from_vec(16, 16, (0..256).map(|_| r.gen_range(0.0..50.0)).collect());
    let m = ModelSpectrogram::from_square_power(&square);
    assert!(m.data.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let back = m.to_square_power();
    for (a, b) in square.data.iter().zip(&back.data) {
        assert_relative_eq!(a, b, max_relative = 1e-9);
    }
}

#[test]
fn power_cache_round_trips_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("spec.spg");
    let mut r = rng::stream(17, "cache", 0);
    let power = Mat::from_vec(12, 7, (0..84).map(|_| r.gen_range(0.0f64..3.0)).collect());
    write_power_cache(&power, 64, &path).unwrap();
    let bytes1 = std::fs::read(&path).unwrap();
    let (back, sq) = read_power_cache(&path).unwrap();
    assert_eq!(sq, 64);
    write_power_cache(&back, sq, &path).unwrap();
    let bytes2 = std::fs::read(&path).unwrap();
    assert_eq!(bytes1, bytes2);
}

#[test]
fn power_cache_detects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trunc.spg");
    let power = Mat::from_vec(4, 4, vec![1.0; 16]);
    write_power_cache(&power, 8, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 5);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        read_power_cache(&path),
        Err(Error::Corruption { .. })
    ));
}
