//! Seeded synthetic datasets for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::vecstore::VectorMatrix;

/// Gaussian blobs: `clusters` centres drawn uniformly from `[0, 100)^dim`,
/// points scattered around them with standard deviation `spread`.
pub fn clustered(n: usize, dim: usize, clusters: usize, spread: f32, seed: u64) -> VectorMatrix {
    clustered_with_queries(n, 0, dim, clusters, spread, seed).0
}

/// Like [`clustered`], plus `nq` held-out queries from the same mixture.
/// The first `n` rows equal `clustered(n, ..)` for the same seed.
pub fn clustered_with_queries(
    n: usize,
    nq: usize,
    dim: usize,
    clusters: usize,
    spread: f32,
    seed: u64,
) -> (VectorMatrix, VectorMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = clusters.max(1);
    let centres: Vec<f32> = (0..clusters * dim).map(|_| rng.gen::<f32>() * 100.0).collect();
    let mut draw = |rows: usize| {
        let mut data = Vec::with_capacity(rows * dim);
        for _ in 0..rows {
            let c = rng.gen_range(0..clusters);
            for j in 0..dim {
                data.push(centres[c * dim + j] + gaussian(&mut rng) * spread);
            }
        }
        VectorMatrix::from_flat(dim, data).expect("dimensions are consistent")
    };
    let data = draw(n);
    (data, draw(nq))
}

/// Uniform points in `[0, 1)^dim`.
pub fn uniform(n: usize, dim: usize, seed: u64) -> VectorMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VectorMatrix::from_flat(dim, (0..n * dim).map(|_| rng.gen::<f32>()).collect())
        .expect("dimensions are consistent")
}

/// Uniform integer points in `[0, 256)^dim`, representable as `u8`.
pub fn uniform_u8(n: usize, dim: usize, seed: u64) -> VectorMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VectorMatrix::from_flat(dim, (0..n * dim).map(|_| rng.gen_range(0u8..=255) as f32).collect())
        .expect("dimensions are consistent")
}

// Box-Muller; rand_distr is not worth a dependency for one normal sampler.
fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let a = clustered(100, 3, 4, 1.0, 7);
        assert_eq!(a, clustered(100, 3, 4, 1.0, 7));
        assert_eq!((a.rows(), a.dim()), (100, 3));
        let (d, q) = clustered_with_queries(100, 5, 3, 4, 1.0, 7);
        assert_eq!(d, a);
        assert_eq!(q.rows(), 5);
        assert!(uniform_u8(10, 5, 1).as_flat().iter().all(|v| v.fract() == 0.0));
    }
}
