//! Synthetic test systems.

use crate::error::{Error, Result};
use crate::grid::{Branch, Entity, EntityKind, GridSystem};
use crate::rng::{ns, ns_index, stream};
use rand::Rng;

/// Emission intensities used for synthetic thermal units, tCO2eq/MWh.
pub const BETA_COAL: f64 = 1.044;
pub const BETA_GAS: f64 = 0.44;

/// Builds a random connected system with the requested entity mix.
///
/// The topology is a ring over all buses plus `n_bus / 4` random chords;
/// entities land on uniformly chosen buses. Thermal units are coal or gas by
/// fair coin, which fixes their emission intensity and offer range. Branch
/// limits are drawn wide enough that congestion shapes dispatch without
/// making typical coalitions infeasible.
///
/// Identical arguments give an identical system, bit for bit.
pub fn synthesize_system(
    n_thermal: usize,
    n_renewable: usize,
    n_load: usize,
    n_bus: usize,
    seed: u64,
) -> Result<GridSystem> {
    if n_bus == 0 {
        return Err(Error::Argument("n_bus must be at least 1".into()));
    }
    if n_thermal + n_renewable + n_load == 0 {
        return Err(Error::Argument("at least one entity is required".into()));
    }
    let mut rng = stream(seed, ns_index(ns::SYNTH, 0));

    let mut entities = Vec::with_capacity(n_thermal + n_renewable + n_load);
    let mut id = 0;
    for _ in 0..n_thermal {
        let bus = rng.random_range(0..n_bus);
        let coal = rng.random::<f64>() < 0.5;
        let (beta, offer_lo, offer_hi) = if coal {
            (BETA_COAL, 15.0, 30.0)
        } else {
            (BETA_GAS, 25.0, 45.0)
        };
        entities.push(Entity {
            id,
            kind: EntityKind::Thermal,
            bus,
            beta,
            p_max: rng.random_range(20.0..100.0),
            base_offer: rng.random_range(offer_lo..offer_hi),
        });
        id += 1;
    }
    for _ in 0..n_renewable {
        entities.push(Entity {
            id,
            kind: EntityKind::Renewable,
            bus: rng.random_range(0..n_bus),
            beta: 0.0,
            p_max: rng.random_range(10.0..80.0),
            base_offer: 0.0,
        });
        id += 1;
    }
    for _ in 0..n_load {
        entities.push(Entity {
            id,
            kind: EntityKind::Load,
            bus: rng.random_range(0..n_bus),
            beta: 0.0,
            p_max: rng.random_range(10.0..80.0),
            base_offer: 0.0,
        });
        id += 1;
    }

    let mut branches = Vec::new();
    if n_bus == 2 {
        branches.push((0usize, 1usize));
    } else if n_bus >= 3 {
        for b in 0..n_bus {
            branches.push((b, (b + 1) % n_bus));
        }
        let is_present = |branches: &[(usize, usize)], a: usize, b: usize| {
            branches
                .iter()
                .any(|&(f, t)| (f, t) == (a, b) || (f, t) == (b, a))
        };
        let want_chords = n_bus / 4;
        let mut added = 0;
        for _ in 0..want_chords * 10 {
            if added == want_chords {
                break;
            }
            let a = rng.random_range(0..n_bus);
            let b = rng.random_range(0..n_bus);
            if a == b || is_present(&branches, a, b) {
                continue;
            }
            branches.push((a, b));
            added += 1;
        }
    }

    let total_gen: f64 = entities
        .iter()
        .filter(|e| e.kind != EntityKind::Load)
        .map(|e| e.p_max)
        .sum();
    let cap_scale = total_gen.max(10.0);
    let branches: Vec<Branch> = branches
        .into_iter()
        .map(|(from, to)| Branch {
            from,
            to,
            x: rng.random_range(0.05..0.2),
            capacity_mw: rng.random_range(0.35..1.0) * cap_scale,
        })
        .collect();

    GridSystem::new(n_bus, 0, branches, entities)
}
