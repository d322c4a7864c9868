#![allow(dead_code)]

use pidvae_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// `B Bᵀ + shift I` for a random `B`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Matrix {
    let b = random_matrix(rng, n, n);
    let mut a = b.matmul_tr(&b).unwrap();
    for i in 0..n {
        a[(i, i)] += shift;
    }
    a
}

/// Central differences of `f` at `x`.
pub fn fd_gradient(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let orig = xp.as_slice()[k];
        xp.as_mut_slice()[k] = orig + step;
        let fp = f(&xp);
        xp.as_mut_slice()[k] = orig - step;
        let fm = f(&xp);
        xp.as_mut_slice()[k] = orig;
        g.as_mut_slice()[k] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Largest entrywise error relative to the overall gradient scale.
pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-12);
    a.max_abs_diff(b) / scale
}
