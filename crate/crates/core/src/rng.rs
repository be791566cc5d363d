//! Seeded random number helpers. All randomness in the crate flows through a
//! ChaCha8 generator so runs are reproducible from a seed.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(lo..hi))
}

/// Standard normal draws via Box-Muller, so no extra distribution dependency
/// and the stream is stable across library versions.
pub fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize), mean: f64, std: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| mean + std * standard_normal(rng))
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Truncated normal in [-2, 2] std units, scaled.
pub fn truncated_normal(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| {
        loop {
            let z = standard_normal(rng);
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    })
}

/// Fisher-Yates permutation of 0..n.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Sample `k` distinct indices from 0..n, in draw order.
pub fn choose(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot choose {k} from {n}");
    let mut p = permutation(rng, n);
    p.truncate(k);
    p
}
