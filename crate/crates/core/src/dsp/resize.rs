//! Bilinear resampling of power matrices with energy renormalization.

use crate::mat::Mat;

/// Bilinear sample at fractional position with edge clamping.
fn bilinear(src: &Mat<f64>, r: f64, c: f64) -> f64 {
    let r0 = (r.floor() as isize).clamp(0, src.rows as isize - 1) as usize;
    let c0 = (c.floor() as isize).clamp(0, src.cols as isize - 1) as usize;
    let r1 = (r0 + 1).min(src.rows - 1);
    let c1 = (c0 + 1).min(src.cols - 1);
    let fr = (r - r0 as f64).clamp(0.0, 1.0);
    let fc = (c - c0 as f64).clamp(0.0, 1.0);
    let top = src.get(r0, c0) * (1.0 - fc) + src.get(r0, c1) * fc;
    let bot = src.get(r1, c0) * (1.0 - fc) + src.get(r1, c1) * fc;
    top * (1.0 - fr) + bot * fr
}

/// Resize to an arbitrary target shape, rescaled so the total stays equal to
/// the source total (bilinear interpolation preserves nonnegativity).
pub fn resize_to(src: &Mat<f64>, rows: usize, cols: usize) -> Mat<f64> {
    assert!(src.rows > 0 && src.cols > 0 && rows > 0 && cols > 0);
    let mut dst = Mat::<f64>::zeros(rows, cols);
    let sr = src.rows as f64 / rows as f64;
    let sc = src.cols as f64 / cols as f64;
    for r in 0..rows {
        // half-pixel centers
        let src_r = (r as f64 + 0.5) * sr - 0.5;
        for c in 0..cols {
            let src_c = (c as f64 + 0.5) * sc - 0.5;
            dst.set(r, c, bilinear(src, src_r, src_c).max(0.0));
        }
    }
    let src_sum = src.sum();
    let dst_sum = dst.sum();
    if dst_sum > 0.0 && src_sum > 0.0 {
        let k = src_sum / dst_sum;
        for v in &mut dst.data {
            *v *= k;
        }
    }
    dst
}

/// Square-resize a power matrix to `n x n`.
pub fn resize_square(src: &Mat<f64>, n: usize) -> Mat<f64> {
    resize_to(src, n, n)
}
