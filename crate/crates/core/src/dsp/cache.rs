//! Spectrogram cache file: magic "SPG1", three u32 dims, f32 LE payload.

use crate::error::{Error, Result};
use crate::mat::Mat;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SPG1";

/// Write a power matrix (with its model square size) to the cache format.
pub fn write_power_cache(
    power: &Mat<f64>,
    square_size: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + power.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(power.rows as u32).to_le_bytes());
    out.extend_from_slice(&(power.cols as u32).to_le_bytes());
    out.extend_from_slice(&(square_size as u32).to_le_bytes());
    for &v in &power.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Read a cache file back as `(power, square_size)`.
pub fn read_power_cache(path: impl AsRef<Path>) -> Result<(Mat<f64>, usize)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            reason: "file shorter than header".into(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected SPG1"));
    }
    let rd = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let bins = rd(4) as usize;
    let frames = rd(8) as usize;
    let square_size = rd(12) as usize;
    let expected = 16 + bins * frames * 4;
    if bytes.len() != expected {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected) as u64,
            reason: format!("expected {} bytes for {}x{}", expected, bins, frames),
        });
    }
    let mut data = Vec::with_capacity(bins * frames);
    for i in 0..bins * frames {
        let o = 16 + i * 4;
        data.push(f64::from(f32::from_le_bytes([
            bytes[o],
            bytes[o + 1],
            bytes[o + 2],
            bytes[o + 3],
        ])));
    }
    Ok((Mat::from_vec(bins, frames, data), square_size))
}
