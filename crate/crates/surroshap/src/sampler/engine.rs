//! Paired coalition sampling and the constrained least-squares resolve.
//!
//! The estimator draws coalitions from the kernel size distribution, pairing
//! every draw with its bitwise complement. Pairing makes the diagonal of the
//! accumulated second-moment matrix exactly 1/2 (each entity appears in
//! precisely one coalition of every pair) and cancels a large share of the
//! sampling variance. The allocation is then the weighted least-squares
//! minimizer restricted to the efficiency hyperplane, obtained in closed form
//! from two symmetric solves against the moment matrix.
//!
//! All randomness is counter-based: draw `p` is generated from an RNG stream
//! keyed by `p` alone, so batches may be produced and evaluated on any number
//! of worker threads without changing a single bit of the output.

use super::{CharacteristicFn, SizeDistribution};
use crate::allocation::{AllocationResult, Method};
use crate::error::{Error, Result};
use crate::grid::Coalition;
use crate::rng::{ns, ns_index, stream};
use crate::sampler::kernel_size_distribution;
use crate::shapley::EFFICIENCY_RTOL;
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

/// Moment matrices above this condition estimate are treated as numerically
/// singular: the sample does not yet pin down an allocation.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Accumulated sampling statistics for one period's game.
///
/// Internally the state stores sums rather than running means; sums of
/// integer coalition indicators are exact in floating point, which is what
/// makes the paired-diagonal identity and merge associativity bit-exact.
#[derive(Debug, Clone)]
pub struct SamplerState {
    n: usize,
    seed: u64,
    /// Next sampling counter: one per pair when pairing, one per coalition
    /// otherwise. Identifies the RNG stream of the next fresh draw.
    next_draw: u64,
    m: u64,
    sum_outer: DMatrix<f64>,
    sum_cb: DVector<f64>,
}

impl SamplerState {
    pub fn new(n: usize, seed: u64) -> Self {
        SamplerState {
            n,
            seed,
            next_draw: 0,
            m: 0,
            sum_outer: DMatrix::zeros(n, n),
            sum_cb: DVector::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Coalitions accumulated so far.
    pub fn samples(&self) -> u64 {
        self.m
    }

    /// Mean outer-product matrix of the accumulated coalition indicators.
    pub fn a_hat(&self) -> DMatrix<f64> {
        debug_assert!(self.m > 0, "moment matrix of an empty state");
        &self.sum_outer / self.m as f64
    }

    /// Mean of value-weighted coalition indicators.
    pub fn b_hat(&self) -> DVector<f64> {
        debug_assert!(self.m > 0, "moment vector of an empty state");
        &self.sum_cb / self.m as f64
    }

    /// Draws `count` coalitions: `count / 2` fresh draws, each immediately
    /// followed by its bitwise complement.
    ///
    /// Interleaving keeps the accumulation sequence identical to the global
    /// draw order no matter how the stream is cut into batches, which is
    /// what makes estimates bit-identical across batch sizes.
    pub fn sample_paired_batch(
        &mut self,
        count: u64,
        dist: &SizeDistribution,
    ) -> Result<Vec<Coalition>> {
        if count % 2 != 0 {
            return Err(Error::Argument(format!(
                "paired batches need an even coalition count, got {count}"
            )));
        }
        let pairs = count / 2;
        let (seed, n) = (self.seed, self.n);
        let fresh: Vec<Coalition> = (self.next_draw..self.next_draw + pairs)
            .into_par_iter()
            .map(|p| draw_coalition(seed, p, n, dist))
            .collect();
        self.next_draw += pairs;
        let mut batch = Vec::with_capacity(count as usize);
        for s in fresh {
            let complement = s.complement();
            batch.push(s);
            batch.push(complement);
        }
        Ok(batch)
    }

    /// Draws `count` independent coalitions without complements. Only useful
    /// for estimator experiments; pairing strictly reduces variance.
    pub fn sample_unpaired_batch(&mut self, count: u64, dist: &SizeDistribution) -> Vec<Coalition> {
        let (seed, n) = (self.seed, self.n);
        let batch = (self.next_draw..self.next_draw + count)
            .into_par_iter()
            .map(|p| draw_coalition(seed, p, n, dist))
            .collect();
        self.next_draw += count;
        batch
    }

    /// Folds evaluated coalitions into the moment sums, in input order.
    pub fn accumulate(&mut self, coalitions: &[Coalition], values: &[f64]) {
        assert_eq!(
            coalitions.len(),
            values.len(),
            "each coalition needs exactly one value"
        );
        let mut members = Vec::with_capacity(self.n);
        for (s, &c) in coalitions.iter().zip(values) {
            s.members_into(&mut members);
            for (a, &i) in members.iter().enumerate() {
                self.sum_cb[i] += c;
                self.sum_outer[(i, i)] += 1.0;
                for &j in &members[a + 1..] {
                    self.sum_outer[(i, j)] += 1.0;
                    self.sum_outer[(j, i)] += 1.0;
                }
            }
            self.m += 1;
        }
    }

    /// Combines two partial states built over disjoint draw ranges, as in a
    /// parallel reduction. Equivalent to a single sequential pass over the
    /// concatenated samples.
    pub fn merge(&mut self, other: &SamplerState) {
        assert_eq!(self.n, other.n, "states describe different games");
        assert_eq!(self.seed, other.seed, "states come from different streams");
        self.sum_outer += &other.sum_outer;
        self.sum_cb += &other.sum_cb;
        self.m += other.m;
        self.next_draw = self.next_draw.max(other.next_draw);
    }
}

/// One fresh kernel draw: size first, then a uniform subset of that size via
/// a partial shuffle. Keyed by the draw counter alone.
fn draw_coalition(seed: u64, counter: u64, n: usize, dist: &SizeDistribution) -> Coalition {
    let mut rng = stream(seed, ns_index(ns::SAMPLE, counter));
    let z = dist.sample(&mut rng);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..z {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    Coalition::from_members(n, &pool[..z])
}

/// Largest-to-smallest eigenvalue magnitude ratio of a symmetric matrix.
fn symmetric_condition(a: &DMatrix<f64>) -> f64 {
    let eigen = SymmetricEigen::new(a.clone());
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for &v in eigen.eigenvalues.iter() {
        let v = v.abs();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Resolves accumulated moments into an allocation that sums exactly to
/// `c_full`.
///
/// With moment matrix A, moment vector b and the all-ones vector e, the
/// constrained minimizer is
///
/// ```text
/// x = A⁻¹ (b - e (eᵀA⁻¹b - c_full) / (eᵀA⁻¹e))
/// ```
///
/// computed from two Cholesky solves, never an explicit inverse. By
/// construction the shares sum to `c_full` up to roundoff, which is verified
/// before returning.
pub fn solve_constrained_wls(state: &SamplerState, c_full: f64) -> Result<AllocationResult> {
    if state.m == 0 {
        return Err(Error::Argument(
            "cannot resolve an allocation from zero samples".into(),
        ));
    }
    let a = state.a_hat();
    let condition = symmetric_condition(&a);
    if !condition.is_finite() || condition > CONDITION_LIMIT {
        return Err(Error::NeedsMoreSamples {
            condition,
            samples: state.m,
        });
    }
    let chol = Cholesky::new(a).ok_or(Error::NeedsMoreSamples {
        condition,
        samples: state.m,
    })?;
    let u = chol.solve(&state.b_hat());
    let ones = DVector::from_element(state.n, 1.0);
    let v = chol.solve(&ones);
    let denom = v.sum();
    if denom <= 0.0 {
        // eᵀA⁻¹e is a positive quadratic form whenever A is positive
        // definite; a non-positive value means the factorization lost all
        // precision.
        return Err(Error::NeedsMoreSamples {
            condition,
            samples: state.m,
        });
    }
    let shift = (u.sum() - c_full) / denom;
    let x = &u - &v * shift;
    let total = x.sum();
    let residual = total - c_full;
    if residual.abs() > EFFICIENCY_RTOL * c_full.abs().max(1.0) {
        return Err(Error::Numeric(format!(
            "allocation sums to {total} instead of {c_full}"
        )));
    }
    Ok(AllocationResult {
        x: x.iter().copied().collect(),
        method: Method::KernelShap,
        t: 0,
        samples: state.m,
        seed: state.seed,
        grand_emissions: c_full,
        efficiency_residual: residual,
    })
}

/// Knobs for [`kernelshap_allocate_with`]. The defaults are the estimator as
/// intended; `paired: false` exists for variance experiments only.
#[derive(Debug, Clone)]
pub struct KernelShapConfig {
    pub paired: bool,
    /// Fresh draws generated and evaluated per batch. Affects scheduling
    /// granularity only, never the result.
    pub batch_pairs: u64,
    /// Sample counts at which the running allocation is recorded. Must be
    /// even, within `2..=M`, and large enough that the moment matrix is
    /// already well conditioned there.
    pub checkpoints: Vec<u64>,
}

impl Default for KernelShapConfig {
    fn default() -> Self {
        KernelShapConfig {
            paired: true,
            batch_pairs: 4096,
            checkpoints: Vec::new(),
        }
    }
}

/// The running allocation recorded at requested sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub samples: u64,
    pub x: Vec<f64>,
}

impl TrajectoryPoint {
    pub fn norm(&self) -> f64 {
        self.x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Intermediate allocations along one sampling run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    /// One row per checkpoint: sample count, allocation norm, then the
    /// allocation entries.
    pub fn to_csv(&self) -> String {
        let n = self.points.first().map_or(0, |p| p.x.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["k".to_string(), "norm".to_string()];
        header.extend((0..n).map(|i| format!("x_{i}")));
        w.write_record(&header).expect("in-memory write");
        for p in &self.points {
            let mut row = vec![p.samples.to_string(), format!("{}", p.norm())];
            row.extend(p.x.iter().map(|v| format!("{v}")));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// `count` sample counts spaced geometrically over `(lo, hi]`, rounded to
/// even values, strictly ascending, ending exactly at `hi`.
pub fn log_spaced_checkpoints(lo: u64, hi: u64, count: usize) -> Vec<u64> {
    assert!(lo % 2 == 0 && hi % 2 == 0, "checkpoint range must be even");
    assert!(hi >= lo + 2, "empty checkpoint range");
    let base = lo.max(2) as f64;
    let ratio = (hi as f64 / base).max(1.0);
    let mut out = Vec::with_capacity(count);
    for i in 1..=count {
        let raw = base * ratio.powf(i as f64 / count as f64);
        let even = ((raw / 2.0).round() as u64 * 2).clamp(lo + 2, hi);
        if out.last() != Some(&even) {
            out.push(even);
        }
    }
    if out.last() != Some(&hi) {
        out.push(hi);
    }
    out
}

/// Estimates the Shapley allocation of `oracle`'s game from `m_samples`
/// kernel-weighted coalitions.
///
/// The grand-coalition value is always taken from a direct oracle
/// evaluation, never estimated; the result sums to it exactly.
pub fn kernelshap_allocate(
    oracle: &dyn CharacteristicFn,
    m_samples: u64,
    seed: u64,
) -> Result<AllocationResult> {
    kernelshap_allocate_with(oracle, m_samples, seed, &KernelShapConfig::default())
        .map(|(result, _)| result)
}

/// As [`kernelshap_allocate`], also recording the running allocation at the
/// configured checkpoints. Results are bit-identical for any rayon worker
/// count and any batch size.
pub fn kernelshap_allocate_with(
    oracle: &dyn CharacteristicFn,
    m_samples: u64,
    seed: u64,
    config: &KernelShapConfig,
) -> Result<(AllocationResult, Trajectory)> {
    if m_samples < 2 || m_samples % 2 != 0 {
        return Err(Error::Argument(format!(
            "sample count must be even and at least 2, got {m_samples}"
        )));
    }
    if config.batch_pairs == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let n = oracle.n_entities();
    let dist = kernel_size_distribution(n)?;
    let mut checkpoints = config.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    for &k in &checkpoints {
        if k < 2 || k > m_samples || k % 2 != 0 {
            return Err(Error::Argument(format!(
                "checkpoint {k} outside the even range 2..={m_samples}"
            )));
        }
    }

    let c_full = oracle.grand_value()?;
    let mut state = SamplerState::new(n, seed);
    let mut trajectory = Trajectory::default();
    let mut pending = checkpoints.iter().copied().peekable();
    while state.samples() < m_samples {
        let target = pending.peek().copied().unwrap_or(m_samples);
        while state.samples() < target {
            let step = (target - state.samples()).min(2 * config.batch_pairs);
            let batch = if config.paired {
                state.sample_paired_batch(step, &dist)?
            } else {
                state.sample_unpaired_batch(step, &dist)
            };
            let values = oracle.eval_batch(&batch)?;
            state.accumulate(&batch, &values);
        }
        if pending.peek() == Some(&target) {
            pending.next();
            let at = solve_constrained_wls(&state, c_full)?;
            trajectory.points.push(TrajectoryPoint {
                samples: target,
                x: at.x,
            });
        }
    }
    let result = solve_constrained_wls(&state, c_full)?;
    Ok((result, trajectory))
}

/// Test-only handle for building states with prescribed moments.
#[cfg(test)]
pub(crate) fn state_from_moments(
    n: usize,
    seed: u64,
    m: u64,
    sum_outer: DMatrix<f64>,
    sum_cb: DVector<f64>,
) -> SamplerState {
    SamplerState {
        n,
        seed,
        next_draw: 0,
        m,
        sum_outer,
        sum_cb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{FnOracle, TableOracle};
    use crate::shapley::{exact_shapley, CharacteristicTable};
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    /// A fixed 3-entity game with unequal, asymmetric values.
    fn small_game() -> CharacteristicTable {
        CharacteristicTable::new(
            3,
            vec![0.0, 4.0, 1.0, 7.5, 0.0, 5.5, 2.0, 9.0],
        )
        .unwrap()
    }

    /// A seeded random game on `n` entities with value spread around 10.
    fn random_game(n: usize, seed: u64) -> CharacteristicTable {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut values: Vec<f64> = (0..1usize << n)
            .map(|_| rng.random_range(0.0..20.0))
            .collect();
        values[0] = 0.0;
        CharacteristicTable::new(n, values).unwrap()
    }

    #[test]
    fn every_draw_is_followed_by_its_complement() {
        let dist = kernel_size_distribution(6).unwrap();
        let mut state = SamplerState::new(6, 3);
        let batch = state.sample_paired_batch(10, &dist).unwrap();
        let full = Coalition::full(6).to_mask();
        for p in 0..5 {
            assert_eq!(batch[2 * p].to_mask() ^ batch[2 * p + 1].to_mask(), full);
        }
    }

    #[test]
    fn batches_never_contain_empty_or_full_coalitions() {
        let dist = kernel_size_distribution(4).unwrap();
        let mut state = SamplerState::new(4, 11);
        for batch_len in [2u64, 6, 1000] {
            for s in state.sample_paired_batch(batch_len, &dist).unwrap() {
                assert!(s.size() >= 1 && s.size() <= 3, "size {}", s.size());
            }
        }
    }

    #[test]
    fn odd_batch_count_is_rejected() {
        let dist = kernel_size_distribution(4).unwrap();
        let mut state = SamplerState::new(4, 0);
        assert!(matches!(
            state.sample_paired_batch(3, &dist),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn sampled_size_histogram_passes_chi_squared() {
        let n = 4;
        let dist = kernel_size_distribution(n).unwrap();
        let mut state = SamplerState::new(n, 17);
        let draws = 100_000u64;
        let batch = state.sample_paired_batch(draws, &dist).unwrap();
        let mut counts = vec![0u64; n - 1];
        for s in &batch {
            counts[s.size() - 1] += 1;
        }
        let chi2: f64 = (1..n)
            .map(|z| {
                let expected = draws as f64 * dist.probability(z);
                let diff = counts[z - 1] as f64 - expected;
                diff * diff / expected
            })
            .sum();
        let dof = (n - 2) as f64;
        let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2={chi2} p={p} counts={counts:?}");
    }

    #[test]
    fn one_pair_gives_exact_half_diagonal() {
        let dist = kernel_size_distribution(5).unwrap();
        let mut state = SamplerState::new(5, 9);
        let batch = state.sample_paired_batch(2, &dist).unwrap();
        state.accumulate(&batch, &[3.0, 4.0]);
        let a = state.a_hat();
        for i in 0..5 {
            assert_eq!(a[(i, i)].to_bits(), 0.5f64.to_bits());
        }
    }

    #[test]
    fn paired_diagonal_is_exact_across_many_batches() {
        let dist = kernel_size_distribution(7).unwrap();
        let mut state = SamplerState::new(7, 23);
        for batch_len in [2u64, 8, 100, 4096, 10] {
            let batch = state.sample_paired_batch(batch_len, &dist).unwrap();
            let values = vec![1.25; batch.len()];
            state.accumulate(&batch, &values);
            let a = state.a_hat();
            for i in 0..7 {
                assert_eq!(a[(i, i)].to_bits(), 0.5f64.to_bits());
            }
        }
    }

    #[test]
    fn zero_values_give_zero_moment_vector() {
        let dist = kernel_size_distribution(4).unwrap();
        let mut state = SamplerState::new(4, 1);
        let batch = state.sample_paired_batch(50, &dist).unwrap();
        state.accumulate(&batch, &vec![0.0; 50]);
        assert!(state.b_hat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_equals_single_pass() {
        let dist = kernel_size_distribution(5).unwrap();
        let table = random_game(5, 99);
        let oracle = TableOracle { table: &table };

        let mut whole = SamplerState::new(5, 5);
        let batch = whole.sample_paired_batch(200, &dist).unwrap();
        let values = oracle.eval_batch(&batch).unwrap();
        whole.accumulate(&batch, &values);

        let mut first = SamplerState::new(5, 5);
        first.accumulate(&batch[..80], &values[..80]);
        let mut second = SamplerState::new(5, 5);
        second.next_draw = first.next_draw;
        second.accumulate(&batch[80..], &values[80..]);
        first.merge(&second);

        assert_eq!(first.samples(), whole.samples());
        let (am, aw) = (first.a_hat(), whole.a_hat());
        let (bm, bw) = (first.b_hat(), whole.b_hat());
        for i in 0..5 {
            assert!((bm[i] - bw[i]).abs() <= 1e-12);
            for j in 0..5 {
                assert!((am[(i, j)] - aw[(i, j)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn off_diagonal_moments_converge_to_their_expectation() {
        // E[s_i s_j] for i != j is sum_z p(z) z(z-1) / (n(n-1)): both members
        // land in a uniform size-z subset with probability z(z-1)/(n(n-1)).
        let n = 6;
        let dist = kernel_size_distribution(n).unwrap();
        let expected: f64 = (1..n)
            .map(|z| dist.probability(z) * (z * (z - 1)) as f64 / ((n * (n - 1)) as f64))
            .sum();
        let mut state = SamplerState::new(n, 31);
        let batch = state.sample_paired_batch(1_000_000, &dist).unwrap();
        state.accumulate(&batch, &vec![0.0; batch.len()]);
        let a = state.a_hat();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    assert!(
                        (a[(i, j)] - expected).abs() <= 3e-3,
                        "({i},{j}): {} vs {expected}",
                        a[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn wls_returns_a_consistent_preimage_exactly() {
        // If the moment vector is exactly A y with y already on the
        // constraint plane, the solve must return y.
        let dist = kernel_size_distribution(4).unwrap();
        let mut state = SamplerState::new(4, 13);
        let batch = state.sample_paired_batch(400, &dist).unwrap();
        state.accumulate(&batch, &vec![0.0; 400]);
        let y = DVector::from_vec(vec![3.0, -1.0, 2.5, 0.5]);
        let c_full = y.sum();
        // b_hat = A y exactly when the stored sum is sum_outer * y.
        let forged = state_from_moments(
            4,
            13,
            state.samples(),
            state.sum_outer.clone(),
            &state.sum_outer * &y,
        );
        let result = solve_constrained_wls(&forged, c_full).unwrap();
        for (got, want) in result.x.iter().zip(y.iter()) {
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn two_entity_solve_matches_hand_algebra() {
        // With two entities only size-1 coalitions exist, so the moment
        // matrix is I/2 and the solve reduces to
        // x = (c/2 + (b1 - b2), c/2 - (b1 - b2)).
        let table = CharacteristicTable::new(2, vec![0.0, 3.0, 1.0, 5.0]).unwrap();
        let oracle = TableOracle { table: &table };
        let dist = kernel_size_distribution(2).unwrap();
        let mut state = SamplerState::new(2, 7);
        let batch = state.sample_paired_batch(100, &dist).unwrap();
        let values = oracle.eval_batch(&batch).unwrap();
        state.accumulate(&batch, &values);

        let a = state.a_hat();
        assert_eq!(a[(0, 1)], 0.0);
        assert_eq!(a[(1, 0)], 0.0);

        let b = state.b_hat();
        let c_full = 5.0;
        let diff = b[0] - b[1];
        let result = solve_constrained_wls(&state, c_full).unwrap();
        assert!((result.x[0] - (c_full / 2.0 + diff)).abs() <= 1e-12);
        assert!((result.x[1] - (c_full / 2.0 - diff)).abs() <= 1e-12);
    }

    #[test]
    fn underdetermined_state_asks_for_more_samples() {
        let dist = kernel_size_distribution(6).unwrap();
        let mut state = SamplerState::new(6, 2);
        let batch = state.sample_paired_batch(2, &dist).unwrap();
        state.accumulate(&batch, &[1.0, 2.0]);
        match solve_constrained_wls(&state, 3.0) {
            Err(Error::NeedsMoreSamples { samples, .. }) => assert_eq!(samples, 2),
            other => panic!("expected a needs-more-samples error, got {other:?}"),
        }
    }

    #[test]
    fn empty_state_is_an_argument_error() {
        let state = SamplerState::new(3, 0);
        assert!(matches!(
            solve_constrained_wls(&state, 1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn close_to_exact_shapley_on_a_small_game() {
        let table = small_game();
        let exact = exact_shapley(&table);
        let oracle = TableOracle { table: &table };
        let estimate = kernelshap_allocate(&oracle, 1_000_000, 4).unwrap();
        let err = relative_l2(&estimate.x, &exact.x);
        assert!(err <= 5e-3, "relative error {err}");
        assert!(
            (estimate.x.iter().sum::<f64>() - table.grand_value()).abs()
                <= 1e-9 * table.grand_value().abs().max(1.0)
        );
    }

    #[test]
    fn rejects_odd_or_tiny_sample_counts() {
        let table = small_game();
        let oracle = TableOracle { table: &table };
        assert!(matches!(
            kernelshap_allocate(&oracle, 0, 1),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            kernelshap_allocate(&oracle, 999, 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn identical_bits_across_thread_counts_and_batch_sizes() {
        let table = random_game(5, 3);
        let oracle = TableOracle { table: &table };
        let run = |threads: usize, batch_pairs: u64| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let config = KernelShapConfig {
                    batch_pairs,
                    ..KernelShapConfig::default()
                };
                kernelshap_allocate_with(&oracle, 2_000, 8, &config)
                    .unwrap()
                    .0
            })
        };
        let reference = run(1, 4096);
        for (threads, batch_pairs) in [(4, 4096), (2, 64), (3, 7), (1, 1000)] {
            let other = run(threads, batch_pairs);
            for (a, b) in reference.x.iter().zip(&other.x) {
                assert_eq!(a.to_bits(), b.to_bits(), "{threads} threads");
            }
        }
    }

    #[test]
    fn doubling_samples_does_not_worsen_median_error() {
        let table = random_game(4, 21);
        let exact = exact_shapley(&table);
        let oracle = TableOracle { table: &table };
        let median_err = |m: u64| {
            let mut errors: Vec<f64> = (0..20)
                .map(|seed| {
                    let est = kernelshap_allocate(&oracle, m, seed).unwrap();
                    relative_l2(&est.x, &exact.x)
                })
                .collect();
            errors.sort_by(|a, b| a.total_cmp(b));
            (errors[9] + errors[10]) / 2.0
        };
        assert!(median_err(4_000) <= median_err(2_000));
    }

    #[test]
    fn pairing_reduces_variance() {
        let table = random_game(4, 77);
        let oracle = TableOracle { table: &table };
        let variance_sum = |paired: bool| {
            let config = KernelShapConfig {
                paired,
                ..KernelShapConfig::default()
            };
            let runs: Vec<Vec<f64>> = (0..50)
                .map(|seed| {
                    kernelshap_allocate_with(&oracle, 2_000, seed, &config)
                        .unwrap()
                        .0
                        .x
                })
                .collect();
            let n = runs[0].len();
            (0..n)
                .map(|i| {
                    let mean = runs.iter().map(|x| x[i]).sum::<f64>() / runs.len() as f64;
                    runs.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / runs.len() as f64
                })
                .sum::<f64>()
        };
        let with = variance_sum(true);
        let without = variance_sum(false);
        assert!(
            with <= without,
            "paired variance {with} vs unpaired {without}"
        );
    }

    #[test]
    fn trajectory_records_requested_checkpoints() {
        let table = random_game(4, 5);
        let oracle = TableOracle { table: &table };
        let config = KernelShapConfig {
            checkpoints: vec![500_000, 600_000, 1_000_000, 800_000],
            batch_pairs: 100_000,
            ..KernelShapConfig::default()
        };
        let (result, trajectory) =
            kernelshap_allocate_with(&oracle, 1_000_000, 2, &config).unwrap();
        let ks: Vec<u64> = trajectory.points.iter().map(|p| p.samples).collect();
        assert_eq!(ks, vec![500_000, 600_000, 800_000, 1_000_000]);
        let last = trajectory.points.last().unwrap();
        for (a, b) in last.x.iter().zip(&result.x) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let csv = trajectory.to_csv();
        assert!(csv.starts_with("k,norm,x_0,x_1,x_2,x_3\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn invalid_checkpoints_are_rejected() {
        let table = small_game();
        let oracle = TableOracle { table: &table };
        for bad in [vec![3u64], vec![0], vec![2_000_000]] {
            let config = KernelShapConfig {
                checkpoints: bad.clone(),
                ..KernelShapConfig::default()
            };
            assert!(
                matches!(
                    kernelshap_allocate_with(&oracle, 1_000, 1, &config),
                    Err(Error::Argument(_))
                ),
                "checkpoints {bad:?} accepted"
            );
        }
    }

    #[test]
    fn checkpoint_spacing_is_even_ascending_and_ends_at_the_top() {
        let points = log_spaced_checkpoints(900_000, 1_000_000, 100);
        assert_eq!(*points.last().unwrap(), 1_000_000);
        assert!(points.len() >= 90);
        let mut prev = 900_000;
        for &k in &points {
            assert!(k % 2 == 0);
            assert!(k > prev, "{k} after {prev}");
            prev = k;
        }

        let from_zero = log_spaced_checkpoints(0, 10_000, 100);
        assert!(from_zero.first().unwrap() >= &2);
        assert_eq!(*from_zero.last().unwrap(), 10_000);
    }

    #[test]
    fn grand_value_comes_from_the_oracle_not_the_samples() {
        let calls = std::sync::atomic::AtomicU64::new(0);
        let oracle = FnOracle {
            n: 3,
            f: |s: &Coalition| {
                if s.size() == 3 {
                    calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                }
                s.size() as f64 * 2.0
            },
        };
        let result = kernelshap_allocate(&oracle, 200, 6).unwrap();
        assert_eq!(result.grand_emissions, 6.0);
        assert!(calls.load(std::sync::atomic::Ordering::Relaxed) >= 1);
        assert!((result.x.iter().sum::<f64>() - 6.0).abs() <= 1e-9 * 6.0);
    }
}
