//! Exact Shapley values over fully tabulated characteristic functions.
//!
//! The table holds the characteristic value of every coalition mask; its
//! size doubles per entity, so exact work is capped at
//! [`MAX_EXACT_ENTITIES`]. Shapley weights are evaluated through
//! log-factorials to stay finite and accurate at any feasible table size.

use crate::allocation::{AllocationResult, Method};
use crate::dcopf::characteristic_emissions;
use crate::error::{Error, Result};
use crate::grid::{Coalition, GridSystem, OperatingConditions};
use crate::rng::{ns, ns_index, stream};
use rand::Rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

/// Hard guard for exact enumeration: 2^24 coalition solves and a 128 MiB
/// table is the largest exact job this crate will attempt.
pub const MAX_EXACT_ENTITIES: usize = 24;

/// Relative tolerance for the efficiency axiom.
pub const EFFICIENCY_RTOL: f64 = 1e-9;

const TABLE_MAGIC: &[u8; 4] = b"SSCT";

/// Characteristic value of every coalition of an `n`-entity game, indexed by
/// membership mask (bit `i` set means entity `i` participates).
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicTable {
    n: usize,
    values: Vec<f64>,
}

impl CharacteristicTable {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || n > MAX_EXACT_ENTITIES {
            return Err(Error::Capacity(format!(
                "characteristic tables support 1..={MAX_EXACT_ENTITIES} entities, got {n}"
            )));
        }
        if values.len() != 1 << n {
            return Err(Error::Argument(format!(
                "table for {n} entities needs {} values, got {}",
                1usize << n,
                values.len()
            )));
        }
        if values[0] != 0.0 {
            return Err(Error::Argument(format!(
                "the empty coalition must have value 0, got {}",
                values[0]
            )));
        }
        Ok(CharacteristicTable { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn value(&self, mask: usize) -> f64 {
        self.values[mask]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grand_value(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let io_err = |e| Error::io(format!("writing {}", path.display()), e);
        file.write_all(TABLE_MAGIC).map_err(io_err)?;
        file.write_all(&(self.n as u32).to_le_bytes()).map_err(io_err)?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf).map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            message,
        };
        let mut header = [0u8; 8];
        file.read_exact(&mut header)
            .map_err(|e| parse_err(format!("truncated header: {e}")))?;
        if &header[..4] != TABLE_MAGIC {
            return Err(parse_err(format!(
                "bad magic {:?}, expected {TABLE_MAGIC:?}",
                &header[..4]
            )));
        }
        let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        if n == 0 || n > MAX_EXACT_ENTITIES {
            return Err(parse_err(format!("entity count {n} out of range")));
        }
        let mut body = Vec::new();
        file.read_to_end(&mut body)
            .map_err(|e| parse_err(format!("truncated body: {e}")))?;
        if body.len() != (1usize << n) * 8 {
            return Err(parse_err(format!(
                "expected {} value bytes for {n} entities, found {}",
                (1usize << n) * 8,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        CharacteristicTable::new(n, values)
    }
}

/// Solves the dispatch problem for every coalition of the system.
///
/// Masks are processed independently, so the table is identical under any
/// thread count. Fails fast with a capacity error above
/// [`MAX_EXACT_ENTITIES`] entities, before any solving starts.
pub fn tabulate_characteristic(
    system: &GridSystem,
    cond: &OperatingConditions,
) -> Result<CharacteristicTable> {
    let n = system.n_entities();
    if n > MAX_EXACT_ENTITIES {
        return Err(Error::Capacity(format!(
            "exact enumeration over {n} entities needs 2^{n} dispatch solves; \
             the guard is {MAX_EXACT_ENTITIES} entities"
        )));
    }
    cond.validate(system)?;
    let values: Vec<f64> = (0..1usize << n)
        .into_par_iter()
        .map(|mask| characteristic_emissions(system, cond, &Coalition::from_mask(n, mask)))
        .collect::<Result<_>>()?;
    CharacteristicTable::new(n, values)
}

/// Natural logs of factorials `0..=n`.
fn ln_factorials(n: usize) -> Vec<f64> {
    let mut lf = vec![0.0; n + 1];
    for k in 1..=n {
        lf[k] = lf[k - 1] + (k as f64).ln();
    }
    lf
}

/// Exact Shapley allocation of the table's grand value.
///
/// For each entity the marginal contribution to every coalition not holding
/// it is weighted by `|S|! (n-|S|-1)! / n!`; weights come from
/// log-factorials so no intermediate factorial overflows.
pub fn exact_shapley(table: &CharacteristicTable) -> AllocationResult {
    let n = table.n();
    let lf = ln_factorials(n);
    let weights: Vec<f64> = (0..n)
        .map(|s| (lf[s] + lf[n - 1 - s] - lf[n]).exp())
        .collect();
    let x: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let bit = 1usize << i;
            let mut sum = 0.0;
            for mask in 0..table.values.len() {
                if mask & bit == 0 {
                    let s = mask.count_ones() as usize;
                    sum += weights[s] * (table.values[mask | bit] - table.values[mask]);
                }
            }
            sum
        })
        .collect();
    let grand = table.grand_value();
    let efficiency_residual = x.iter().sum::<f64>() - grand;
    AllocationResult {
        x,
        method: Method::Exact,
        t: 0,
        samples: 0,
        seed: 0,
        grand_emissions: grand,
        efficiency_residual,
    }
}

#[derive(Debug, Clone)]
pub struct AxiomCheck {
    pub passed: bool,
    pub detail: String,
}

/// Outcome of checking the four Shapley axioms for `x` against `table`.
#[derive(Debug, Clone)]
pub struct AxiomReport {
    pub efficiency: AxiomCheck,
    pub symmetry: AxiomCheck,
    pub dummy: AxiomCheck,
    pub additivity: AxiomCheck,
}

impl AxiomReport {
    pub fn all_passed(&self) -> bool {
        self.efficiency.passed && self.symmetry.passed && self.dummy.passed && self.additivity.passed
    }
}

/// Verifies the Shapley axioms.
///
/// Efficiency, symmetry and dummy are checked directly on `(table, x)`;
/// additivity is checked by allocating two seeded random games and their sum
/// and comparing the results, which exercises the allocation path rather
/// than the input.
pub fn check_axioms(table: &CharacteristicTable, x: &[f64], seed: u64) -> Result<AxiomReport> {
    let n = table.n();
    if x.len() != n {
        return Err(Error::Argument(format!(
            "allocation has {} entries for an {n}-entity table",
            x.len()
        )));
    }
    let scale = table.grand_value().abs().max(1.0);
    let tol = EFFICIENCY_RTOL * scale;

    let residual = x.iter().sum::<f64>() - table.grand_value();
    let efficiency = AxiomCheck {
        passed: residual.abs() <= tol,
        detail: format!("sum(x) - c(N) = {residual:.3e} against tolerance {tol:.3e}"),
    };

    let mut symmetric_pairs = Vec::new();
    let mut symmetry_ok = true;
    for i in 0..n {
        for j in i + 1..n {
            if is_interchangeable(table, i, j, tol) {
                symmetric_pairs.push((i, j));
                if (x[i] - x[j]).abs() > tol {
                    symmetry_ok = false;
                }
            }
        }
    }
    let symmetry = AxiomCheck {
        passed: symmetry_ok,
        detail: format!("{} interchangeable pairs: {symmetric_pairs:?}", symmetric_pairs.len()),
    };

    let mut dummies = Vec::new();
    let mut dummy_ok = true;
    for i in 0..n {
        if is_dummy(table, i, tol) {
            dummies.push(i);
            let own = table.value(1 << i);
            if (x[i] - own).abs() > tol {
                dummy_ok = false;
            }
        }
    }
    let dummy = AxiomCheck {
        passed: dummy_ok,
        detail: format!("{} dummy players: {dummies:?}", dummies.len()),
    };

    let additivity = check_additivity(n, seed, tol)?;
    Ok(AxiomReport {
        efficiency,
        symmetry,
        dummy,
        additivity,
    })
}

fn is_interchangeable(table: &CharacteristicTable, i: usize, j: usize, tol: f64) -> bool {
    let (bi, bj) = (1usize << i, 1usize << j);
    for mask in 0..table.values.len() {
        if mask & bi == 0 && mask & bj == 0 {
            if (table.values[mask | bi] - table.values[mask | bj]).abs() > tol {
                return false;
            }
        }
    }
    true
}

fn is_dummy(table: &CharacteristicTable, i: usize, tol: f64) -> bool {
    let bi = 1usize << i;
    let own = table.values[bi];
    for mask in 0..table.values.len() {
        if mask & bi == 0 {
            if (table.values[mask | bi] - table.values[mask] - own).abs() > tol {
                return false;
            }
        }
    }
    true
}

fn check_additivity(n: usize, seed: u64, tol: f64) -> Result<AxiomCheck> {
    let mut rng = stream(seed, ns_index(ns::AXIOM, 0));
    let random_table = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut values: Vec<f64> = (0..1usize << n).map(|_| rng.random_range(-50.0..50.0)).collect();
        values[0] = 0.0;
        CharacteristicTable::new(n, values)
    };
    let u = random_table(&mut rng)?;
    let w = random_table(&mut rng)?;
    let sum_values: Vec<f64> = u
        .values
        .iter()
        .zip(&w.values)
        .map(|(a, b)| a + b)
        .collect();
    let uw = CharacteristicTable::new(n, sum_values)?;
    let xu = exact_shapley(&u);
    let xw = exact_shapley(&w);
    let xuw = exact_shapley(&uw);
    let mut worst = 0.0f64;
    for i in 0..n {
        worst = worst.max((xu.x[i] + xw.x[i] - xuw.x[i]).abs());
    }
    let scale = uw.grand_value().abs().max(50.0);
    Ok(AxiomCheck {
        passed: worst <= tol.max(EFFICIENCY_RTOL * scale),
        detail: format!("max |x_u + x_w - x_(u+w)| = {worst:.3e} on seeded random games"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Entity, EntityKind, GridSystem};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use tempfile::tempdir;

    /// Brute-force Shapley by averaging marginal contributions over all n!
    /// orderings. Independent of the weighted-sum implementation.
    fn permutation_shapley(table: &CharacteristicTable) -> Vec<f64> {
        let n = table.n();
        let mut order: Vec<usize> = (0..n).collect();
        let mut x = vec![0.0; n];
        let mut count = 0u64;
        permute(&mut order, 0, &mut |perm| {
            let mut mask = 0usize;
            for &i in perm {
                let before = table.value(mask);
                mask |= 1 << i;
                x[i] += table.value(mask) - before;
            }
            count += 1;
        });
        for v in &mut x {
            *v /= count as f64;
        }
        x
    }

    fn permute(order: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == order.len() {
            visit(order);
            return;
        }
        for i in k..order.len() {
            order.swap(k, i);
            permute(order, k + 1, visit);
            order.swap(k, i);
        }
    }

    /// Single bus, three entities: thermal (bit 0), renewable (bit 1),
    /// load (bit 2). Thermal alone with the load emits 5; renewable crowds
    //  out 3 MW of it.
    fn three_entity_system() -> (GridSystem, OperatingConditions) {
        let sys = GridSystem::new(
            1,
            0,
            vec![],
            vec![
                Entity { id: 0, kind: EntityKind::Thermal, bus: 0, beta: 1.0, p_max: 10.0, base_offer: 20.0 },
                Entity { id: 1, kind: EntityKind::Renewable, bus: 0, beta: 0.0, p_max: 5.0, base_offer: 0.0 },
                Entity { id: 2, kind: EntityKind::Load, bus: 0, beta: 0.0, p_max: 8.0, base_offer: 0.0 },
            ],
        )
        .unwrap();
        let cond = OperatingConditions {
            t: 1,
            offers: vec![20.0],
            r_max: vec![3.0],
            d_max: vec![5.0],
            voll: 100.0,
        };
        (sys, cond)
    }

    #[test]
    fn three_entity_table_and_allocation() {
        let (sys, cond) = three_entity_system();
        let table = tabulate_characteristic(&sys, &cond).unwrap();
        assert_eq!(table.values(), &[0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 2.0]);
        let alloc = exact_shapley(&table);
        assert_abs_diff_eq!(alloc.x[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(alloc.x[1], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(alloc.x[2], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(alloc.efficiency_residual, 0.0, epsilon = 1e-12);
        let report = check_axioms(&table, &alloc.x, 7).unwrap();
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn two_symmetric_thermals_split_evenly() {
        let sys = GridSystem::new(
            1,
            0,
            vec![],
            vec![
                Entity { id: 0, kind: EntityKind::Thermal, bus: 0, beta: 1.0, p_max: 10.0, base_offer: 20.0 },
                Entity { id: 1, kind: EntityKind::Thermal, bus: 0, beta: 1.0, p_max: 10.0, base_offer: 20.0 },
                Entity { id: 2, kind: EntityKind::Load, bus: 0, beta: 0.0, p_max: 5.0, base_offer: 0.0 },
            ],
        )
        .unwrap();
        let cond = OperatingConditions {
            t: 1,
            offers: vec![20.0, 20.0],
            r_max: vec![],
            d_max: vec![5.0],
            voll: 100.0,
        };
        let table = tabulate_characteristic(&sys, &cond).unwrap();
        let alloc = exact_shapley(&table);
        assert_abs_diff_eq!(alloc.x[0], alloc.x[1], epsilon = 1e-9);
        let report = check_axioms(&table, &alloc.x, 1).unwrap();
        assert!(report.symmetry.passed, "{:?}", report.symmetry);
    }

    #[test]
    fn matches_permutation_enumeration() {
        for seed in 0..6u64 {
            let n = 1 + (seed as usize % 6);
            let mut rng = crate::rng::stream(900 + seed, 0);
            let mut values: Vec<f64> = (0..1usize << n)
                .map(|_| rand::Rng::random_range(&mut rng, -30.0..30.0))
                .collect();
            values[0] = 0.0;
            let table = CharacteristicTable::new(n, values).unwrap();
            let fast = exact_shapley(&table);
            let slow = permutation_shapley(&table);
            for i in 0..n {
                assert_abs_diff_eq!(fast.x[i], slow[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn capacity_guard_fires_before_any_solving() {
        let n_load = 23;
        let entities: Vec<Entity> = std::iter::once(Entity {
            id: 0, kind: EntityKind::Thermal, bus: 0, beta: 0.5, p_max: 500.0, base_offer: 20.0,
        })
        .chain((0..n_load).map(|k| Entity {
            id: 1 + k, kind: EntityKind::Load, bus: 0, beta: 0.0, p_max: 10.0, base_offer: 0.0,
        }))
        .chain(std::iter::once(Entity {
            id: 1 + n_load, kind: EntityKind::Load, bus: 0, beta: 0.0, p_max: 10.0, base_offer: 0.0,
        }))
        .collect();
        let sys = GridSystem::new(1, 0, vec![], entities).unwrap();
        assert_eq!(sys.n_entities(), 25);
        let cond = OperatingConditions {
            t: 1,
            offers: vec![20.0],
            r_max: vec![],
            d_max: vec![10.0; 24],
            voll: 100.0,
        };
        let started = std::time::Instant::now();
        let err = tabulate_characteristic(&sys, &cond).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)), "{err}");
        assert!(started.elapsed().as_millis() < 100, "guard must fire immediately");
    }

    #[test]
    fn table_io_round_trip() {
        let dir = tempdir().unwrap();
        let (sys, cond) = three_entity_system();
        let table = tabulate_characteristic(&sys, &cond).unwrap();
        let path = dir.path().join("table.ssct");
        table.save(&path).unwrap();
        let back = CharacteristicTable::load(&path).unwrap();
        assert_eq!(back, table);
        std::fs::write(&path, b"SSXT\x03\x00\x00\x00").unwrap();
        assert!(CharacteristicTable::load(&path).is_err());
    }

    #[test]
    fn dummy_player_gets_its_standalone_value() {
        // v(S) = 3*[0 in S] + |S intersect {1,2}|^2: player 0 is a dummy.
        let n = 3;
        let values: Vec<f64> = (0..8usize)
            .map(|mask| {
                let others = ((mask >> 1) & 0b11usize).count_ones() as f64;
                3.0 * ((mask & 1) as f64) + others * others
            })
            .collect();
        let table = CharacteristicTable::new(n, values).unwrap();
        let alloc = exact_shapley(&table);
        assert_abs_diff_eq!(alloc.x[0], 3.0, epsilon = 1e-12);
        let report = check_axioms(&table, &alloc.x, 3).unwrap();
        assert!(report.dummy.passed && report.dummy.detail.contains("[0]"), "{report:?}");
    }

    #[test]
    fn axiom_failures_are_detected() {
        let (sys, cond) = three_entity_system();
        let table = tabulate_characteristic(&sys, &cond).unwrap();
        let bad = vec![2.0, -1.0, 1.5];
        let report = check_axioms(&table, &bad, 7).unwrap();
        assert!(!report.efficiency.passed);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn efficiency_and_linearity_hold_on_random_games(
            n in 1usize..6,
            seed in 0u64..1_000,
            alpha in -3.0f64..3.0,
        ) {
            let mut rng = crate::rng::stream(seed, 1);
            let mut gen_values = || {
                let mut v: Vec<f64> = (0..1usize << n)
                    .map(|_| rand::Rng::random_range(&mut rng, -100.0..100.0))
                    .collect();
                v[0] = 0.0;
                v
            };
            let u = CharacteristicTable::new(n, gen_values()).unwrap();
            let w = CharacteristicTable::new(n, gen_values()).unwrap();
            let xu = exact_shapley(&u);
            let xw = exact_shapley(&w);
            prop_assert!((xu.x.iter().sum::<f64>() - u.grand_value()).abs() <= 1e-9 * u.grand_value().abs().max(1.0));

            let mixed: Vec<f64> = u.values().iter().zip(w.values()).map(|(a, b)| alpha * a + b).collect();
            let xm = exact_shapley(&CharacteristicTable::new(n, mixed).unwrap());
            for i in 0..n {
                let expect = alpha * xu.x[i] + xw.x[i];
                prop_assert!((xm.x[i] - expect).abs() <= 1e-9 * expect.abs().max(1.0));
            }
        }
    }
}
