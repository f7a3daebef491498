//! Complex Schur decomposition: Householder Hessenberg reduction followed by
//! explicitly shifted QR with Wilkinson shifts, then a similarity reordering
//! that sorts the diagonal by descending eigenvalue magnitude.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::schur::eig_order;
use num_complex::Complex64;

type CMat = Mat<Complex64>;

/// Unitary factor, upper-triangular factor, and magnitude-sorted eigenvalues
/// of a square matrix: `a = q * t * q^H`.
#[derive(Debug, Clone)]
pub struct SchurForm {
    pub q: CMat,
    pub t: CMat,
    pub eigenvalues: Vec<Complex64>,
}

fn identity(n: usize) -> CMat {
    let mut m = CMat::zeros(n, n);
    for i in 0..n {
        m.set(i, i, Complex64::new(1.0, 0.0));
    }
    m
}

/// Householder reduction to upper Hessenberg form, accumulating the
/// transformation into `q` when present.
fn hessenberg(h: &mut CMat, mut q: Option<&mut CMat>) {
    let n = h.rows;
    for k in 0..n.saturating_sub(2) {
        // Householder vector for column k below the diagonal
        let mut norm_sq = 0.0;
        for i in k + 1..n {
            norm_sq += h.get(i, k).norm_sqr();
        }
        if norm_sq == 0.0 {
            continue;
        }
        let x0 = h.get(k + 1, k);
        let alpha = if x0.norm() > 0.0 {
            -(x0 / x0.norm()) * norm_sq.sqrt()
        } else {
            Complex64::new(-norm_sq.sqrt(), 0.0)
        };
        let mut v: Vec<Complex64> = (k + 1..n).map(|i| h.get(i, k)).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for c in &mut v {
            *c /= vnorm;
        }

        // h <- (I - 2 v v^H) h : rows k+1..n
        for j in 0..n {
            let mut dot = Complex64::new(0.0, 0.0);
            for (i, vi) in v.iter().enumerate() {
                dot += vi.conj() * h.get(k + 1 + i, j);
            }
            dot *= 2.0;
            for (i, vi) in v.iter().enumerate() {
                let val = h.get(k + 1 + i, j) - vi * dot;
                h.set(k + 1 + i, j, val);
            }
        }
        // h <- h (I - 2 v v^H) : cols k+1..n
        for i in 0..n {
            let mut dot = Complex64::new(0.0, 0.0);
            for (j, vj) in v.iter().enumerate() {
                dot += h.get(i, k + 1 + j) * vj;
            }
            dot *= 2.0;
            for (j, vj) in v.iter().enumerate() {
                let val = h.get(i, k + 1 + j) - dot * vj.conj();
                h.set(i, k + 1 + j, val);
            }
        }
        if let Some(q) = q.as_deref_mut() {
            for i in 0..n {
                let mut dot = Complex64::new(0.0, 0.0);
                for (j, vj) in v.iter().enumerate() {
                    dot += q.get(i, k + 1 + j) * vj;
                }
                dot *= 2.0;
                for (j, vj) in v.iter().enumerate() {
                    let val = q.get(i, k + 1 + j) - dot * vj.conj();
                    q.set(i, k + 1 + j, val);
                }
            }
        }
        // entries below the first subdiagonal are now zero by construction
        h.set(k + 1, k, alpha);
        for i in k + 2..n {
            h.set(i, k, Complex64::new(0.0, 0.0));
        }
    }
}

/// Unitary plane rotation `[[c, s], [-conj(s), c]]` (c real) sending
/// `(f, g)` to `(r, 0)`.
fn givens(f: Complex64, g: Complex64) -> (f64, Complex64, Complex64) {
    if g.norm() == 0.0 {
        return (1.0, Complex64::new(0.0, 0.0), f);
    }
    if f.norm() == 0.0 {
        return (0.0, g.conj() / g.norm(), Complex64::new(g.norm(), 0.0));
    }
    let d = (f.norm_sqr() + g.norm_sqr()).sqrt();
    let fu = f / f.norm();
    let c = f.norm() / d;
    let s = fu * g.conj() / d;
    (c, s, fu * d)
}

#[inline]
fn rot_left(h: &mut CMat, c: f64, s: Complex64, r0: usize, r1: usize, col_from: usize) {
    let n = h.cols;
    for j in col_from..n {
        let a = h.get(r0, j);
        let b = h.get(r1, j);
        h.set(r0, j, a * c + s * b);
        h.set(r1, j, -s.conj() * a + b * c);
    }
}

#[inline]
fn rot_right(h: &mut CMat, c: f64, s: Complex64, c0: usize, c1: usize, row_to: usize) {
    for i in 0..row_to {
        let a = h.get(i, c0);
        let b = h.get(i, c1);
        h.set(i, c0, a * c + s.conj() * b);
        h.set(i, c1, -s * a + b * c);
    }
}

/// Wilkinson shift: the eigenvalue of the trailing 2x2 block closest to its
/// bottom-right entry.
fn wilkinson_shift(h: &CMat, hi: usize) -> Complex64 {
    let a = h.get(hi - 1, hi - 1);
    let b = h.get(hi - 1, hi);
    let c = h.get(hi, hi - 1);
    let d = h.get(hi, hi);
    let tr = a + d;
    let det = a * d - b * c;
    let disc = (tr * tr - det * 4.0).sqrt();
    let l1 = (tr + disc) * 0.5;
    let l2 = (tr - disc) * 0.5;
    if (l1 - d).norm() <= (l2 - d).norm() {
        l1
    } else {
        l2
    }
}

/// Shifted QR iteration on an upper Hessenberg matrix. Applies the same
/// unitary updates to `q` when present.
fn qr_iterate(h: &mut CMat, mut q: Option<&mut CMat>, _max_sweeps: usize) -> Result<()> {
    let n = h.rows;
    if n <= 1 {
        return Ok(());
    }
    let hnorm = h.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if hnorm == 0.0 {
        return Ok(());
    }

    let mut hi = n - 1;
    let mut sweeps = 0usize;
    let mut since_deflation = 0usize;
    while hi > 0 {
        // deflate converged subdiagonals
        let mut deflated = true;
        while hi > 0 && deflated {
            let sub = h.get(hi, hi - 1).norm();
            let mut tol = f64::EPSILON * (h.get(hi - 1, hi - 1).norm() + h.get(hi, hi).norm());
            if tol == 0.0 {
                tol = f64::EPSILON * hnorm;
            }
            if sub <= tol {
                h.set(hi, hi - 1, Complex64::new(0.0, 0.0));
                hi -= 1;
                since_deflation = 0;
            } else {
                deflated = false;
            }
        }
        if hi == 0 {
            break;
        }

        // find the active block [lo..=hi]
        let mut lo = hi;
        while lo > 0 {
            let sub = h.get(lo, lo - 1).norm();
            let mut tol = f64::EPSILON * (h.get(lo - 1, lo - 1).norm() + h.get(lo, lo).norm());
            if tol == 0.0 {
                tol = f64::EPSILON * hnorm;
            }
            if sub <= tol {
                h.set(lo, lo - 1, Complex64::new(0.0, 0.0));
                break;
            }
            lo -= 1;
        }

        sweeps += 1;
        since_deflation += 1;
        if sweeps > 30 * n {
            return Err(Error::Numerical(format!(
                "QR iteration did not converge within {} sweeps",
                30 * n
            )));
        }

        let mu = if since_deflation % 12 == 0 {
            // exceptional shift to break rare cycles
            h.get(hi, hi) + Complex64::new(0.75 * h.get(hi, hi - 1).norm(), 0.0)
        } else {
            wilkinson_shift(h, hi)
        };

        for k in lo..=hi {
            let v = h.get(k, k) - mu;
            h.set(k, k, v);
        }
        let mut rots = Vec::with_capacity(hi - lo);
        for k in lo..hi {
            let (c, s, r) = givens(h.get(k, k), h.get(k + 1, k));
            h.set(k, k, r);
            h.set(k + 1, k, Complex64::new(0.0, 0.0));
            rot_left(h, c, s, k, k + 1, k + 1);
            rots.push((c, s));
        }
        for (k, &(c, s)) in rots.iter().enumerate() {
            let k = lo + k;
            rot_right(h, c, s, k, k + 1, (k + 2).min(n));
            if let Some(q) = q.as_deref_mut() {
                rot_right(q, c, s, k, k + 1, n);
            }
        }
        for k in lo..=hi {
            let v = h.get(k, k) + mu;
            h.set(k, k, v);
        }
    }
    Ok(())
}

/// Swap the adjacent diagonal entries `t[j][j]` and `t[j+1][j+1]` of a
/// triangular matrix by a unitary similarity, updating `q`.
fn swap_adjacent(t: &mut CMat, q: Option<&mut CMat>, j: usize) {
    let n = t.rows;
    let a = t.get(j, j);
    let b = t.get(j, j + 1);
    let d = t.get(j + 1, j + 1);
    // rotation whose first column is the eigenvector of [[a, b], [0, d]]
    // for eigenvalue d
    let v0 = b;
    let v1 = d - a;
    let r = (v0.norm_sqr() + v1.norm_sqr()).sqrt();
    if r == 0.0 {
        return;
    }
    let g00 = v0 / r;
    let g10 = v1 / r;
    // G = [[g00, -conj(g10)], [g10, conj(g00)]]; apply G^H from the left and
    // G from the right
    for col in j..n {
        let x = t.get(j, col);
        let y = t.get(j + 1, col);
        t.set(j, col, g00.conj() * x + g10.conj() * y);
        t.set(j + 1, col, -g10 * x + g00 * y);
    }
    for row in 0..=(j + 1) {
        let x = t.get(row, j);
        let y = t.get(row, j + 1);
        t.set(row, j, x * g00 + y * g10);
        t.set(row, j + 1, x * -g10.conj() + y * g00.conj());
    }
    t.set(j + 1, j, Complex64::new(0.0, 0.0));
    if let Some(q) = q {
        for row in 0..n {
            let x = q.get(row, j);
            let y = q.get(row, j + 1);
            q.set(row, j, x * g00 + y * g10);
            q.set(row, j + 1, x * -g10.conj() + y * g00.conj());
        }
    }
}

/// Sort the triangular diagonal into descending-magnitude order with
/// adjacent similarity swaps. The permutation is fixed up front from the
/// unsorted diagonal, so roundoff in the swaps cannot stall the pass.
fn sort_schur(t: &mut CMat, q: &mut CMat) {
    let n = t.rows;
    let diag: Vec<Complex64> = (0..n).map(|k| t.get(k, k)).collect();
    let mut want: Vec<usize> = (0..n).collect();
    want.sort_by(|&i, &j| eig_order(&diag[i], &diag[j]));
    // occupant[pos] = original index of the eigenvalue now at pos
    let mut occupant: Vec<usize> = (0..n).collect();
    for target in 0..n {
        let from = (target..n)
            .find(|&p| occupant[p] == want[target])
            .expect("permutation invariant");
        for j in (target..from).rev() {
            swap_adjacent(t, Some(q), j);
            occupant.swap(j, j + 1);
        }
    }
}

fn check_input(a: &CMat) -> Result<usize> {
    if !a.is_square() || a.rows == 0 {
        return Err(Error::Domain(format!(
            "Schur decomposition expects a nonempty square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if a.data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::Domain("matrix contains non-finite entries".into()));
    }
    Ok(a.rows)
}

/// Full complex Schur decomposition with descending-magnitude diagonal.
pub fn schur_decompose(a: &CMat) -> Result<SchurForm> {
    let n = check_input(a)?;
    let mut t = a.clone();
    let mut q = identity(n);
    hessenberg(&mut t, Some(&mut q));
    qr_iterate(&mut t, Some(&mut q), 30 * n)?;
    // clean the strictly lower triangle
    for i in 0..n {
        for j in 0..i {
            t.set(i, j, Complex64::new(0.0, 0.0));
        }
    }
    sort_schur(&mut t, &mut q);
    let eigenvalues = (0..n).map(|k| t.get(k, k)).collect();
    Ok(SchurForm { q, t, eigenvalues })
}

/// Eigenvalues only (no unitary factor accumulated), sorted descending by
/// magnitude.
pub fn eigenvalues(a: &CMat) -> Result<Vec<Complex64>> {
    let n = check_input(a)?;
    let mut t = a.clone();
    hessenberg(&mut t, None);
    qr_iterate(&mut t, None, 30 * n)?;
    let mut eigs: Vec<Complex64> = (0..n).map(|k| t.get(k, k)).collect();
    eigs.sort_by(eig_order);
    Ok(eigs)
}
