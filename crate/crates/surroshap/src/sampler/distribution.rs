//! The Shapley-kernel distribution over coalition sizes.
//!
//! The kernel weight of a single coalition S depends only on its size z, and
//! summing it over all C(n, z) subsets of one size gives a per-size
//! probability proportional to (n-1) / (z (n-z)). Sampling therefore splits
//! in two stages: draw a size from this distribution, then a uniform subset
//! of that size. Sizes 0 and n are excluded; the kernel weight diverges
//! there, which is exactly why the full coalition enters the estimator as a
//! hard constraint instead.

use crate::error::{Error, Result};
use rand::Rng;

/// Probabilities over coalition sizes 1..=n-1 with a precomputed cumulative
/// table for inverse-CDF draws.
#[derive(Debug, Clone)]
pub struct SizeDistribution {
    n: usize,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl SizeDistribution {
    /// Number of entities in the game.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Probability of drawing size `z`, for `z` in `1..=n-1`.
    pub fn probability(&self, z: usize) -> f64 {
        self.probs[z - 1]
    }

    /// All per-size probabilities, indexed by `z - 1`.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// Draws a coalition size in `1..=n-1`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        // partition_point returns how many cdf entries are below u, which is
        // the zero-based size index; the final cdf entry is exactly 1.0, so
        // the result stays in range for any u in [0, 1).
        self.cdf.partition_point(|&c| c <= u).min(self.probs.len() - 1) + 1
    }
}

/// Builds the per-size sampling distribution for an `n`-entity game.
pub fn kernel_size_distribution(n: usize) -> Result<SizeDistribution> {
    if n < 2 {
        return Err(Error::Argument(format!(
            "size distribution needs at least 2 entities, got {n}"
        )));
    }
    let mut probs: Vec<f64> = (1..n)
        .map(|z| (n - 1) as f64 / ((z * (n - z)) as f64))
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in &probs {
        acc += p;
        cdf.push(acc);
    }
    // Guard the last bucket against accumulated rounding.
    *cdf.last_mut().expect("n >= 2 gives at least one size") = 1.0;
    Ok(SizeDistribution { n, probs, cdf })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn two_entities_have_a_single_size() {
        let d = kernel_size_distribution(2).unwrap();
        assert_eq!(d.probabilities(), &[1.0]);
        let mut rng = stream(7, 0);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut rng), 1);
        }
    }

    #[test]
    fn four_entity_probabilities_match_hand_values() {
        // Unnormalized weights 3/(z(4-z)) for z = 1, 2, 3 are (1, 3/4, 1),
        // so the probabilities are (4/11, 3/11, 4/11).
        let d = kernel_size_distribution(4).unwrap();
        assert!((d.probability(1) - 4.0 / 11.0).abs() < 1e-15);
        assert!((d.probability(2) - 3.0 / 11.0).abs() < 1e-15);
        assert!((d.probability(3) - 4.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_and_normalized_for_many_sizes() {
        for n in 2..=40 {
            let d = kernel_size_distribution(n).unwrap();
            let sum: f64 = d.probabilities().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "n={n} sum={sum}");
            for z in 1..n {
                // z(n-z) is computed in integers, so mirrored sizes produce
                // bit-identical weights.
                assert_eq!(d.probability(z), d.probability(n - z), "n={n} z={z}");
            }
        }
    }

    #[test]
    fn sampling_matches_probabilities() {
        let d = kernel_size_distribution(5).unwrap();
        let mut rng = stream(42, 1);
        let draws = 200_000;
        let mut counts = vec![0u64; 4];
        for _ in 0..draws {
            counts[d.sample(&mut rng) - 1] += 1;
        }
        for z in 1..5 {
            let freq = counts[z - 1] as f64 / draws as f64;
            assert!(
                (freq - d.probability(z)).abs() < 5e-3,
                "z={z} freq={freq} expected={}",
                d.probability(z)
            );
        }
    }

    #[test]
    fn rejects_degenerate_games() {
        assert!(matches!(
            kernel_size_distribution(1),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            kernel_size_distribution(0),
            Err(Error::Argument(_))
        ));
    }
}
