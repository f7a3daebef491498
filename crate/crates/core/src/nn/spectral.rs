//! Spectral normalization by power iteration.

use crate::nn::real::Real;
use crate::nn::tensor::Tensor;

/// Estimate the largest singular value of `weight` viewed as a 2-D matrix
/// (leading dim x rest) and return `weight / sigma`.
///
/// `u` is the persistent left vector; it is (re)initialized when its length
/// does not match and refined in place. Weights with `sigma < 1e-12` are
/// returned unchanged.
pub fn spectral_normalize<T: Real>(weight: &Tensor<T>, iters: usize, u: &mut Vec<T>) -> Tensor<T> {
    let o = weight.shape.first().copied().unwrap_or(0);
    if o == 0 {
        return weight.clone();
    }
    let k: usize = weight.shape[1..].iter().product();
    if k == 0 {
        return weight.clone();
    }
    let w = &weight.data;
    if u.len() != o {
        *u = vec![T::one() / T::from_usize(o).unwrap().sqrt(); o];
    }
    let mut v = vec![T::zero(); k];
    let mut sigma = T::zero();
    for _ in 0..iters.max(1) {
        // v = normalize(W^T u)
        for x in v.iter_mut() {
            *x = T::zero();
        }
        for row in 0..o {
            let ur = u[row];
            for col in 0..k {
                v[col] += w[row * k + col] * ur;
            }
        }
        let vn = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if vn < T::of_f64(1e-12) {
            return weight.clone();
        }
        for x in v.iter_mut() {
            *x /= vn;
        }
        // u = normalize(W v)
        for row in 0..o {
            let mut acc = T::zero();
            for col in 0..k {
                acc += w[row * k + col] * v[col];
            }
            u[row] = acc;
        }
        let un = u.iter().map(|&x| x * x).sum::<T>().sqrt();
        if un < T::of_f64(1e-12) {
            return weight.clone();
        }
        for x in u.iter_mut() {
            *x /= un;
        }
        sigma = un;
    }
    if sigma < T::of_f64(1e-12) {
        return weight.clone();
    }
    let mut out = weight.clone();
    for x in &mut out.data {
        *x /= sigma;
    }
    out
}
