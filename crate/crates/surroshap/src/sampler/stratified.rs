//! Stratified Monte Carlo estimation of Shapley values.
//!
//! The classical estimator: entity `i`'s share is the average of its marginal
//! contribution over coalitions drawn without `i`, stratified by coalition
//! size so every insertion position contributes with the weight the Shapley
//! formula gives it. Unlike the kernel-weighted estimator this one never
//! enforces efficiency; the residual is measured and reported instead.

use super::CharacteristicFn;
use crate::allocation::{AllocationResult, Method};
use crate::error::{Error, Result};
use crate::grid::Coalition;
use crate::rng::{ns, ns_index, stream};
use rand::Rng;
use rayon::prelude::*;

/// Estimates the allocation from stratified marginal-contribution sampling.
///
/// `m_samples` is the marginal budget per entity, split as evenly as
/// possible across its `n` size strata; every marginal costs two oracle
/// evaluations, so a run performs `2 * n * m_samples` of them in total.
/// Strata are fully deterministic: each (entity, size) cell has its own
/// counter-derived RNG stream, so results do not depend on worker count.
pub fn stratified_mc_allocate(
    oracle: &dyn CharacteristicFn,
    m_samples: u64,
    seed: u64,
) -> Result<AllocationResult> {
    let n = oracle.n_entities();
    if n == 0 {
        return Err(Error::Argument("the game has no entities".into()));
    }
    if m_samples < n as u64 {
        return Err(Error::Argument(format!(
            "stratified sampling needs a budget of at least {n}, one draw per stratum, got {m_samples}"
        )));
    }
    let base = m_samples / n as u64;
    let extra = (m_samples % n as u64) as usize;

    let x: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut total = 0.0;
            for z in 0..n {
                let budget = base + u64::from(z < extra);
                let mut rng = stream(seed, ns_index(ns::STRATUM, (i * n + z) as u64));
                let mut mean = 0.0;
                for draw in 0..budget {
                    // Uniform subset of size z from the entities other than i.
                    for a in 0..z {
                        let b = rng.random_range(a..others.len());
                        others.swap(a, b);
                    }
                    let mut s = Coalition::from_members(n, &others[..z]);
                    let without = oracle.eval(&s)?;
                    s.insert(i);
                    let with = oracle.eval(&s)?;
                    mean += (with - without - mean) / (draw + 1) as f64;
                }
                total += mean;
            }
            Ok(total / n as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    let grand = oracle.grand_value()?;
    let efficiency_residual = x.iter().sum::<f64>() - grand;
    Ok(AllocationResult {
        x,
        method: Method::Stratified,
        t: 0,
        samples: m_samples,
        seed,
        grand_emissions: grand,
        efficiency_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{FnOracle, TableOracle};
    use crate::shapley::{exact_shapley, CharacteristicTable};

    #[test]
    fn constant_game_gets_a_zero_allocation() {
        let oracle = FnOracle {
            n: 4,
            f: |_: &Coalition| 7.0,
        };
        let result = stratified_mc_allocate(&oracle, 40, 3).unwrap();
        assert!(result.x.iter().all(|&v| v == 0.0));
        // No efficiency enforcement: the residual records the full gap.
        assert_eq!(result.efficiency_residual, -7.0);
    }

    #[test]
    fn close_to_exact_on_a_small_game() {
        let table =
            CharacteristicTable::new(3, vec![0.0, 4.0, 1.0, 7.5, 0.0, 5.5, 2.0, 9.0]).unwrap();
        let exact = exact_shapley(&table);
        let oracle = TableOracle { table: &table };
        let estimate = stratified_mc_allocate(&oracle, 1_000_000, 11).unwrap();
        let num: f64 = estimate
            .x
            .iter()
            .zip(&exact.x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = exact.x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den <= 1e-2, "relative error {}", num / den);
    }

    #[test]
    fn efficiency_residual_is_nonzero_in_general() {
        let table =
            CharacteristicTable::new(3, vec![0.0, 4.0, 1.0, 7.5, 0.0, 5.5, 2.0, 9.0]).unwrap();
        let oracle = TableOracle { table: &table };
        let result = stratified_mc_allocate(&oracle, 300, 5).unwrap();
        assert!(result.efficiency_residual != 0.0);
        assert_eq!(result.method, Method::Stratified);
        assert_eq!(result.samples, 300);
    }

    #[test]
    fn budget_below_one_per_stratum_is_rejected() {
        let table = CharacteristicTable::new(3, vec![0.0; 8]).unwrap();
        let oracle = TableOracle { table: &table };
        assert!(matches!(
            stratified_mc_allocate(&oracle, 2, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let table =
            CharacteristicTable::new(4, vec![0.0, 1.0, 2.0, 3.5, 1.0, 2.5, 3.0, 6.0, 0.5, 2.0, 2.5, 4.0, 1.5, 4.5, 4.0, 8.0])
                .unwrap();
        let oracle = TableOracle { table: &table };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| stratified_mc_allocate(&oracle, 1_000, 9).unwrap())
        };
        let a = run(1);
        let b = run(4);
        for (x, y) in a.x.iter().zip(&b.x) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
