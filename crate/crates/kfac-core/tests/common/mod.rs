//! Helpers shared by the integration test suites.

use kfac_core::linalg::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix with independent standard-normal entries.
pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let normal = StandardNormal;
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        let z: f64 = normal.sample(rng);
        *v = z;
    }
    m
}

/// Random symmetric positive-definite matrix: BᵀB plus a ridge that floors
/// the spectrum, keeping the inverse well conditioned.
pub fn rand_spd(rng: &mut ChaCha8Rng, n: usize, ridge: f64) -> Matrix {
    let b = rand_matrix(rng, n + 2, n);
    let mut spd = b.gram();
    for i in 0..n {
        spd[(i, i)] += ridge;
    }
    spd
}

/// Entrywise maximum absolute difference.
pub fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.rows(), b.rows());
    assert_eq!(a.cols(), b.cols());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Report one acceptance criterion: prints a single PASS/FAIL line and
/// panics on failure so the test harness records it.
pub fn criterion(n: u32, name: &str, body: impl FnOnce() -> Result<String, String>) {
    match body() {
        Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
        Err(why) => {
            println!("FAIL criterion {n} ({name}): {why}");
            panic!("criterion {n} ({name}) failed: {why}");
        }
    }
}
