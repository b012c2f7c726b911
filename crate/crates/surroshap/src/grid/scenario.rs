//! Scenario generation over a horizon of periods.

use crate::error::{Error, Result};
use crate::grid::{GridSystem, OperatingConditions, Scenario, DEFAULT_VOLL};
use crate::rng::{ns, ns_index, stream};
use rand::Rng;

/// Daily availability shape for renewables: zero at midnight, one at noon.
/// `t` is the 1-based period index; hours wrap every 24 periods.
pub fn diurnal_factor(t: usize) -> f64 {
    let hour = ((t - 1) % 24) as f64;
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * hour / 24.0).cos())
}

/// Draws a horizon of operating conditions for `system`.
///
/// Per period, thermal offers scale their base offer by U[0.8, 1.2];
/// renewable ceilings scale the nameplate by the diurnal shape times
/// U[0, 1.2]; load ceilings scale nominal demand by U[0.4, 1.2]. Each period
/// has its own counter-derived stream, so regeneration from the same
/// `(system, t_periods, seed)` is bit-identical regardless of scheduling.
pub fn generate_scenario(system: &GridSystem, t_periods: usize, seed: u64) -> Result<Scenario> {
    generate_scenario_with_voll(system, t_periods, seed, DEFAULT_VOLL)
}

pub fn generate_scenario_with_voll(
    system: &GridSystem,
    t_periods: usize,
    seed: u64,
    voll: f64,
) -> Result<Scenario> {
    if t_periods == 0 {
        return Err(Error::Argument("t_periods must be at least 1".into()));
    }
    let max_offer = system
        .thermals()
        .iter()
        .map(|e| e.base_offer * 1.2)
        .fold(0.0f64, f64::max);
    if voll <= max_offer {
        return Err(Error::Argument(format!(
            "voll {voll} must exceed the largest possible offer {max_offer}"
        )));
    }
    let periods = (1..=t_periods)
        .map(|t| {
            let mut rng = stream(seed, ns_index(ns::SCENARIO, t as u64));
            let offers = system
                .thermals()
                .iter()
                .map(|e| e.base_offer * rng.random_range(0.8..1.2))
                .collect();
            let shape = diurnal_factor(t);
            let r_max = system
                .renewables()
                .iter()
                .map(|e| e.p_max * shape * rng.random_range(0.0..1.2))
                .collect();
            let d_max = system
                .loads()
                .iter()
                .map(|e| e.p_max * rng.random_range(0.4..1.2))
                .collect();
            OperatingConditions {
                t,
                offers,
                r_max,
                d_max,
                voll,
            }
        })
        .collect();
    let scenario = Scenario {
        periods,
        seed: Some(seed),
    };
    scenario.validate(system)?;
    Ok(scenario)
}
