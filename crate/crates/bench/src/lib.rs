//! Shared fixtures for the criterion benches.

use aasvd_core::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform [-1, 1) matrix from a fixed seed.
pub fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Random SPD matrix `Z^T Z + I`.
pub fn seeded_spd(n: usize, seed: u64) -> Matrix {
    let z = seeded_matrix(n, n, seed);
    let mut s = z.matmul_tn(&z).expect("square");
    s.add_diag(1.0);
    s
}
