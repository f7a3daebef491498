//! Schur-domain spectrogram analysis: complex Schur decomposition, eigenvalue
//! chordal distances, the truncated distance adjustment, the span regularizer,
//! and rank-based output tuning.

mod decomp;

pub use decomp::{eigenvalues, schur_decompose, SchurForm};

use crate::error::{Error, Result};
use crate::mat::Mat;
use num_complex::Complex64;

/// Terms of the latent-projection objective for one `(input, synthesized)`
/// spectrogram pair.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionTerms {
    /// Truncated chordal-distance sum over the top-`j` eigenvalue pairs.
    pub gamma_star: f64,
    /// L1 mass of the difference matrix's eigenvalues.
    pub span_l1: f64,
    /// Retained eigenvalue count.
    pub j: usize,
}

/// Lift a real matrix into the complex plane.
pub fn to_complex(a: &Mat<f64>) -> Mat<Complex64> {
    a.map(|v| Complex64::new(v, 0.0))
}

/// Chordal distance between two points of the compactified complex plane:
/// `|a - b| / (sqrt(1 + |a|^2) * sqrt(1 + |b|^2))`, symmetric, in `[0, 1]`.
pub fn chordal_distance(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / ((1.0 + a.norm_sqr()).sqrt() * (1.0 + b.norm_sqr()).sqrt())
}

/// Descending-magnitude eigenvalue order; ties broken by descending real
/// part, then descending imaginary part.
pub(crate) fn eig_order(a: &Complex64, b: &Complex64) -> std::cmp::Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then(b.re.total_cmp(&a.re))
        .then(b.im.total_cmp(&a.im))
}

fn require_same_square(x: &Mat<f64>, g: &Mat<f64>) -> Result<usize> {
    if !x.is_square() || !g.is_square() || x.rows != g.rows {
        return Err(Error::Domain(format!(
            "expected matching square matrices, got {}x{} and {}x{}",
            x.rows, x.cols, g.rows, g.cols
        )));
    }
    Ok(x.rows)
}

/// Truncated chordal-distance adjustment between two square spectrograms:
/// the sum of per-pair chordal distances over the top `j = ceil(ratio * n)`
/// magnitude-sorted eigenvalues.
pub fn gamma_star(x: &Mat<f64>, g: &Mat<f64>, ratio: f64) -> Result<f64> {
    let n = require_same_square(x, g)?;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Domain(format!("ratio must be in (0, 1], got {ratio}")));
    }
    let j = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let ex = eigenvalues(&to_complex(x))?;
    let eg = eigenvalues(&to_complex(g))?;
    Ok((0..j).map(|k| chordal_distance(eg[k], ex[k])).sum())
}

/// Span regularizer: L1 norm of the eigenvalue sequence of `g - x`.
pub fn span_reg(x: &Mat<f64>, g: &Mat<f64>) -> Result<f64> {
    let n = require_same_square(x, g)?;
    let mut d = Mat::<Complex64>::zeros(n, n);
    for i in 0..n * n {
        d.data[i] = Complex64::new(g.data[i] - x.data[i], 0.0);
    }
    let eigs = eigenvalues(&d)?;
    Ok(eigs.iter().map(|l| l.norm()).sum())
}

/// Both projection terms from one pair of eigen-decompositions.
pub fn projection_terms(x: &Mat<f64>, g: &Mat<f64>, ratio: f64) -> Result<ProjectionTerms> {
    let n = require_same_square(x, g)?;
    let j = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    Ok(ProjectionTerms {
        gamma_star: gamma_star(x, g, ratio)?,
        span_l1: span_reg(x, g)?,
        j,
    })
}

/// Eigenvalue-based numerical rank: the number of eigenvalues above
/// `n * eps * |lambda_1|`.
///
/// A matrix whose largest eigenvalue magnitude is zero cannot be truncated by
/// this criterion, so nonzero nilpotent-like inputs report full rank; the
/// zero matrix reports rank 0.
pub fn numerical_rank(x: &Mat<f64>) -> Result<usize> {
    if !x.is_square() {
        return Err(Error::Domain("numerical_rank expects a square matrix".into()));
    }
    let n = x.rows;
    if n == 0 {
        return Ok(0);
    }
    let eigs = eigenvalues(&to_complex(x))?;
    let top = eigs[0].norm();
    if top == 0.0 {
        let all_zero = x.data.iter().all(|&v| v == 0.0);
        return Ok(if all_zero { 0 } else { n });
    }
    let tol = n as f64 * f64::EPSILON * top;
    Ok(eigs.iter().filter(|l| l.norm() > tol).count())
}

/// Tune a synthesized spectrogram to a target eigenvalue rank: zero the Schur
/// diagonal beyond `target_rank` (magnitude order), reconstruct, take the
/// real part, and clamp negatives to zero.
pub fn rank_tune(g: &Mat<f64>, target_rank: usize) -> Result<Mat<f64>> {
    if !g.is_square() {
        return Err(Error::Domain("rank_tune expects a square matrix".into()));
    }
    let n = g.rows;
    if target_rank >= n {
        return Ok(g.clone());
    }
    let form = schur_decompose(&to_complex(g))?;
    let mut t = form.t;
    for k in target_rank..n {
        t.set(k, k, Complex64::new(0.0, 0.0));
    }
    // q * t' * q^H
    let q = &form.q;
    let mut qt = Mat::<Complex64>::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            let qik = q.get(i, k);
            for j in 0..n {
                let v = qt.get(i, j) + qik * t.get(k, j);
                qt.set(i, j, v);
            }
        }
    }
    let mut out = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..n {
                acc += qt.get(i, k) * q.get(j, k).conj();
            }
            out.set(i, j, acc.re.max(0.0));
        }
    }
    Ok(out)
}
