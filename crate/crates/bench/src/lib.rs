//! Seeded inputs shared by the benchmarks.

use bevshape::geometry::{Box3D, ScoredBox};
use bevshape::pillars::Point;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Car-sized boxes scattered over a 40 m square.
pub fn random_boxes(n: usize, seed: u64) -> Vec<ScoredBox> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| ScoredBox {
            bbox: Box3D::new(
                r.random_range(0.0..40.0),
                r.random_range(-20.0..20.0),
                -1.0,
                r.random_range(3.5..4.5),
                r.random_range(1.5..1.8),
                1.5,
                r.random_range(-3.1..3.1),
            ),
            score: r.random(),
            class_id: 0,
        })
        .collect()
}

/// Uniform cloud over the desk grid's volume.
pub fn random_cloud(n: usize, seed: u64) -> Vec<Point> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            [
                r.random_range(0.0..20.48),
                r.random_range(-10.24..10.24),
                r.random_range(-3.0..1.0),
                r.random(),
            ]
        })
        .collect()
}

pub fn random_values(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}
