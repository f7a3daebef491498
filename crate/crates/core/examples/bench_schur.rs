use sdgan_core::mat::Mat;
use sdgan_core::schur::{eigenvalues, schur_decompose, to_complex};
use std::time::Instant;

fn main() {
    let n = 64;
    let mut data = vec![0.0f64; n * n];
    let mut state = 12345u64;
    for v in data.iter_mut() {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *v = ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5;
    }
    let a = to_complex(&Mat::from_vec(n, n, data));
    let t0 = Instant::now();
    for _ in 0..20 { let _ = eigenvalues(&a).unwrap(); }
    println!("eigenvalues 64x64: {:?}/call", t0.elapsed() / 20);
    let t1 = Instant::now();
    for _ in 0..10 { let _ = schur_decompose(&a).unwrap(); }
    println!("full schur 64x64:  {:?}/call", t1.elapsed() / 10);
}
