//! Fixtures shared by the benchmarks.

use divemb::params::uniform_matrix;
use divemb::EmbeddingSet;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `n` random `k x d` sets from a fixed seed.
pub fn random_sets(n: usize, k: usize, d: usize, seed: u64) -> Vec<EmbeddingSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| EmbeddingSet::new(uniform_matrix(&mut rng, k, d, 1.0)).expect("finite"))
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(super::random_sets(3, 2, 4, 7), super::random_sets(3, 2, 4, 7));
    }
}
