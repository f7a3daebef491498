//! RIFF/WAVE codec: PCM16 and IEEE float32 read, PCM16 write.

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

fn rd_u16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn rd_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Read a WAV file into a mono waveform.
///
/// Stereo input is averaged to mono; PCM16 samples are scaled by `1/32768`.
pub fn wav_read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format(path, "missing RIFF/WAVE header"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = rd_u32(&bytes, off + 4) as usize;
        let body_start = off + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= bytes.len());
        let body_end = match body_end {
            Some(e) => e,
            None => return Err(Error::format(path, "chunk overruns file")),
        };
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format(path, "fmt chunk too short"));
                }
                fmt = Some((
                    rd_u16(&bytes, body_start),
                    rd_u16(&bytes, body_start + 2),
                    rd_u32(&bytes, body_start + 4),
                    rd_u16(&bytes, body_start + 14),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // chunks are word-aligned
        off = body_end + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::format(path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| Error::format(path, "missing data chunk"))?;
    if channels == 0 || channels > 2 {
        return Err(Error::Unsupported {
            what: "channel count".into(),
            detail: format!("{channels} channels (expected 1 or 2)"),
        });
    }
    if rate == 0 {
        return Err(Error::format(path, "zero sample rate"));
    }

    let ch = channels as usize;
    let samples: Vec<f64> = match (format, bits) {
        (FORMAT_PCM, 16) => {
            let n = data.len() / 2 / ch;
            (0..n)
                .map(|i| {
                    let mut acc = 0.0;
                    for c in 0..ch {
                        let off = (i * ch + c) * 2;
                        let v = i16::from_le_bytes([data[off], data[off + 1]]);
                        acc += f64::from(v) / 32768.0;
                    }
                    acc / ch as f64
                })
                .collect()
        }
        (FORMAT_IEEE_FLOAT, 32) => {
            let n = data.len() / 4 / ch;
            (0..n)
                .map(|i| {
                    let mut acc = 0.0;
                    for c in 0..ch {
                        let off = (i * ch + c) * 4;
                        let v = f32::from_le_bytes([
                            data[off],
                            data[off + 1],
                            data[off + 2],
                            data[off + 3],
                        ]);
                        acc += f64::from(v);
                    }
                    acc / ch as f64
                })
                .collect()
        }
        (f, b) => {
            return Err(Error::Unsupported {
                what: "wav codec".into(),
                detail: format!("format tag {f} with {b} bits"),
            })
        }
    };

    Ok(Waveform {
        samples,
        sample_rate: rate,
        source_path: Some(path.to_path_buf()),
    })
}

/// Write a mono waveform as 16-bit PCM little-endian.
///
/// Out-of-range samples are saturated to full scale; returns the number of
/// clipped samples.
pub fn wav_write(w: &Waveform, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    w.assert_finite()?;

    let mut clipped = 0usize;
    let mut pcm = Vec::with_capacity(w.samples.len() * 2);
    for &s in &w.samples {
        let scaled = (s * 32768.0).round();
        let q = if scaled > 32767.0 {
            clipped += 1;
            32767
        } else if scaled < -32768.0 {
            clipped += 1;
            -32768
        } else {
            scaled as i32
        };
        pcm.extend_from_slice(&(q as i16).to_le_bytes());
    }

    let data_len = pcm.len() as u32;
    let mut out = Vec::with_capacity(44 + pcm.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.extend_from_slice(&pcm);

    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    if clipped > 0 {
        eprintln!(
            "warning: {} sample(s) clipped to full scale writing {}",
            clipped,
            path.display()
        );
    }
    Ok(clipped)
}
