//! Coalition dispatch: the characteristic function of the allocation game.
//!
//! For a coalition S the dispatch problem serves the loads in S from the
//! generators in S at minimum offer cost minus the value of served load,
//! subject to generator and demand ceilings and two-sided PTDF flow limits.
//! Load shedding is implicitly allowed (demand variables may fall short of
//! their ceiling), priced at the value of lost load, so every coalition is
//! feasible. The emissions attributable to S are the beta-weighted thermal
//! outputs of its optimal dispatch.

pub mod lp;
mod simplex;

pub use lp::{LinearProgram, LinearRow, RangedRow};
pub use simplex::{solve as solve_lp_raw, SimplexSolution, FEASIBILITY_TOL, OPTIMALITY_TOL};

use crate::error::{Error, Result};
use crate::grid::{Coalition, EntityKind, GridSystem, OperatingConditions};

/// Reported power balance must close to this many MW.
pub const REPORT_TOL_MW: f64 = 1e-6;

/// Optimal dispatch of one coalition. The `*_ids` vectors give the entity
/// ids behind each output column, in ascending order.
#[derive(Debug, Clone)]
pub struct DispatchSolution {
    pub objective: f64,
    pub thermal_ids: Vec<usize>,
    pub p_thermal: Vec<f64>,
    pub renewable_ids: Vec<usize>,
    pub p_renewable: Vec<f64>,
    pub load_ids: Vec<usize>,
    pub p_load: Vec<f64>,
    /// Flow per branch under the optimal injections, MW.
    pub flows: Vec<f64>,
    pub iterations: usize,
    pub optimality_residual: f64,
}

impl DispatchSolution {
    /// Beta-weighted thermal output, tCO2eq.
    pub fn emissions(&self, system: &GridSystem) -> f64 {
        self.thermal_ids
            .iter()
            .zip(&self.p_thermal)
            .map(|(&id, p)| system.entities[id].beta * p)
            .sum()
    }

    pub fn total_generation(&self) -> f64 {
        self.p_thermal.iter().sum::<f64>() + self.p_renewable.iter().sum::<f64>()
    }

    pub fn total_load(&self) -> f64 {
        self.p_load.iter().sum()
    }
}

/// Assembles the dispatch LP for `coalition`. Variables are the outputs of
/// the coalition's entities in ascending entity order; an empty coalition
/// yields an empty program.
pub fn build_coalition_lp(
    system: &GridSystem,
    cond: &OperatingConditions,
    coalition: &Coalition,
) -> LinearProgram {
    let members = coalition.members();
    if members.is_empty() {
        return LinearProgram::empty();
    }
    let n = members.len();
    let mut objective = Vec::with_capacity(n);
    let lower = vec![0.0; n];
    let mut upper = Vec::with_capacity(n);
    let mut balance = Vec::with_capacity(n);
    for (j, &id) in members.iter().enumerate() {
        let e = &system.entities[id];
        match e.kind {
            EntityKind::Thermal => {
                objective.push(cond.offers[id]);
                upper.push(e.p_max);
                balance.push((j, 1.0));
            }
            EntityKind::Renewable => {
                objective.push(0.0);
                upper.push(cond.r_max[system.renewable_local(id)]);
                balance.push((j, 1.0));
            }
            EntityKind::Load => {
                objective.push(-cond.voll);
                upper.push(cond.d_max[system.load_local(id)]);
                balance.push((j, -1.0));
            }
        }
    }
    let equalities = vec![LinearRow {
        coeffs: balance,
        rhs: 0.0,
        label: "balance".into(),
    }];
    let ptdf = &system.network.ptdf;
    let ranges = system
        .network
        .branches
        .iter()
        .enumerate()
        .map(|(f, br)| {
            let coeffs = members
                .iter()
                .enumerate()
                .filter_map(|(j, &id)| {
                    let e = &system.entities[id];
                    let sign = if e.kind == EntityKind::Load { -1.0 } else { 1.0 };
                    let a = sign * ptdf[(f, e.bus)];
                    (a != 0.0).then_some((j, a))
                })
                .collect();
            RangedRow {
                coeffs,
                lo: -br.capacity_mw,
                hi: br.capacity_mw,
                label: format!("flow[{f}]"),
            }
        })
        .collect();
    LinearProgram {
        n_vars: n,
        objective,
        lower,
        upper,
        equalities,
        ranges,
    }
}

/// Solves the coalition dispatch problem and checks the solution against the
/// model's feasibility contracts.
pub fn solve_coalition(
    system: &GridSystem,
    cond: &OperatingConditions,
    coalition: &Coalition,
) -> Result<DispatchSolution> {
    let members = coalition.members();
    let lp = build_coalition_lp(system, cond, coalition);
    let sol = simplex::solve(&lp).map_err(|e| match e {
        Error::Infeasible { phase1_objective, .. } => Error::Infeasible {
            context: format!(
                "coalition of {} entities; program:\n{}",
                members.len(),
                lp.dump()
            ),
            phase1_objective,
        },
        other => other,
    })?;

    let mut out = DispatchSolution {
        objective: sol.objective,
        thermal_ids: Vec::new(),
        p_thermal: Vec::new(),
        renewable_ids: Vec::new(),
        p_renewable: Vec::new(),
        load_ids: Vec::new(),
        p_load: Vec::new(),
        flows: vec![0.0; system.network.branches.len()],
        iterations: sol.iterations,
        optimality_residual: sol.optimality_residual,
    };
    let ptdf = &system.network.ptdf;
    for (j, &id) in members.iter().enumerate() {
        let e = &system.entities[id];
        let p = sol.x[j];
        let sign = match e.kind {
            EntityKind::Thermal => {
                out.thermal_ids.push(id);
                out.p_thermal.push(p);
                1.0
            }
            EntityKind::Renewable => {
                out.renewable_ids.push(id);
                out.p_renewable.push(p);
                1.0
            }
            EntityKind::Load => {
                out.load_ids.push(id);
                out.p_load.push(p);
                -1.0
            }
        };
        for f in 0..out.flows.len() {
            out.flows[f] += sign * ptdf[(f, e.bus)] * p;
        }
    }

    let imbalance = (out.total_generation() - out.total_load()).abs();
    if imbalance > REPORT_TOL_MW {
        return Err(Error::Numeric(format!(
            "power balance violated by {imbalance:.3e} MW"
        )));
    }
    for (f, br) in system.network.branches.iter().enumerate() {
        if out.flows[f].abs() > br.capacity_mw + REPORT_TOL_MW {
            return Err(Error::Numeric(format!(
                "flow on branch {f} is {:.6} MW against a {:.6} MW limit",
                out.flows[f], br.capacity_mw
            )));
        }
    }
    Ok(out)
}

/// The characteristic function: emissions caused by coalition `S` dispatching
/// on its own. Zero without solving when `S` holds no thermal unit, since
/// only thermal output emits.
pub fn characteristic_emissions(
    system: &GridSystem,
    cond: &OperatingConditions,
    coalition: &Coalition,
) -> Result<f64> {
    let has_thermal = (0..system.counts().thermal).any(|g| coalition.contains(g));
    if !has_thermal {
        return Ok(0.0);
    }
    Ok(solve_coalition(system, cond, coalition)?.emissions(system))
}

/// Emissions of the grand coalition, the quantity an allocation distributes.
pub fn grand_coalition_emissions(system: &GridSystem, cond: &OperatingConditions) -> Result<f64> {
    characteristic_emissions(system, cond, &Coalition::full(system.n_entities()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{synthesize_system, Branch, Entity, GridSystem};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn entity(id: usize, kind: EntityKind, bus: usize, beta: f64, p_max: f64, offer: f64) -> Entity {
        Entity {
            id,
            kind,
            bus,
            beta,
            p_max,
            base_offer: offer,
        }
    }

    /// Single bus: one thermal (beta 1, 10 MW, offer 20), one renewable
    /// (3 MW available), one load (5 MW, voll 100).
    fn merit_order_system() -> (GridSystem, OperatingConditions) {
        let sys = GridSystem::new(
            1,
            0,
            vec![],
            vec![
                entity(0, EntityKind::Thermal, 0, 1.0, 10.0, 20.0),
                entity(1, EntityKind::Renewable, 0, 0.0, 5.0, 0.0),
                entity(2, EntityKind::Load, 0, 0.0, 8.0, 0.0),
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
    fn merit_order_dispatches_renewable_first() {
        let (sys, cond) = merit_order_system();
        let sol = solve_coalition(&sys, &cond, &Coalition::full(3)).unwrap();
        assert_abs_diff_eq!(sol.p_load[0], 5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.p_renewable[0], 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.p_thermal[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.objective, 20.0 * 2.0 - 100.0 * 5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.emissions(&sys), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn line_limit_forces_shedding() {
        // Generator and load on opposite ends of a 2 MW line: only 2 of the
        // 5 MW demand can be served.
        let sys = GridSystem::new(
            2,
            0,
            vec![Branch {
                from: 0,
                to: 1,
                x: 0.1,
                capacity_mw: 2.0,
            }],
            vec![
                entity(0, EntityKind::Thermal, 0, 0.8, 10.0, 20.0),
                entity(1, EntityKind::Load, 1, 0.0, 5.0, 0.0),
            ],
        )
        .unwrap();
        let cond = OperatingConditions {
            t: 1,
            offers: vec![20.0],
            r_max: vec![],
            d_max: vec![5.0],
            voll: 1000.0,
        };
        let sol = solve_coalition(&sys, &cond, &Coalition::full(2)).unwrap();
        assert_abs_diff_eq!(sol.p_load[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.p_thermal[0], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.flows[0].abs(), 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.emissions(&sys), 1.6, epsilon = 1e-9);
    }

    #[test]
    fn empty_and_thermal_free_coalitions_emit_nothing() {
        let (sys, cond) = merit_order_system();
        let empty = build_coalition_lp(&sys, &cond, &Coalition::empty(3));
        assert_eq!(empty.n_vars, 0);
        assert!(empty.equalities.is_empty() && empty.ranges.is_empty());
        assert_eq!(
            characteristic_emissions(&sys, &cond, &Coalition::empty(3)).unwrap(),
            0.0
        );
        let rl = Coalition::from_members(3, &[1, 2]);
        assert_eq!(characteristic_emissions(&sys, &cond, &rl).unwrap(), 0.0);
    }

    #[test]
    fn coalition_without_loads_shuts_down() {
        let (sys, cond) = merit_order_system();
        let gens = Coalition::from_members(3, &[0, 1]);
        let sol = solve_coalition(&sys, &cond, &gens).unwrap();
        assert_eq!(sol.p_thermal[0], 0.0);
        assert_eq!(sol.p_renewable[0], 0.0);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn single_bus_program_has_no_flow_rows() {
        let (sys, cond) = merit_order_system();
        let lp = build_coalition_lp(&sys, &cond, &Coalition::full(3));
        assert!(lp.ranges.is_empty());
        assert_eq!(lp.equalities.len(), 1);
        assert_eq!(lp.n_vars, 3);
    }

    /// Independent oracle: exhaustive 0.01 MW grid over (load, renewable)
    /// with the thermal output implied by balance.
    fn grid_search_oracle(
        sys: &GridSystem,
        cond: &OperatingConditions,
        g_max: f64,
        r_max: f64,
        d_max: f64,
    ) -> f64 {
        let step = 0.01;
        let offer = cond.offers[0];
        let n_d = (d_max / step).floor() as usize;
        let n_r = (r_max / step).floor() as usize;
        let mut best = f64::INFINITY;
        for di in 0..=n_d {
            let d = di as f64 * step;
            for ri in 0..=n_r {
                let r = ri as f64 * step;
                let g = d - r;
                if g < -1e-12 || g > g_max {
                    continue;
                }
                let g = g.max(0.0);
                let mut feasible = true;
                for (f, br) in sys.network.branches.iter().enumerate() {
                    let ptdf = &sys.network.ptdf;
                    let flow = ptdf[(f, sys.entities[0].bus)] * g
                        + ptdf[(f, sys.entities[1].bus)] * r
                        - ptdf[(f, sys.entities[2].bus)] * d;
                    if flow.abs() > br.capacity_mw + 1e-9 {
                        feasible = false;
                        break;
                    }
                }
                if feasible {
                    best = best.min(offer * g - cond.voll * d);
                }
            }
        }
        best
    }

    #[test]
    fn matches_grid_search_on_small_networks() {
        let mut rng = crate::rng::stream(404, 0);
        for case in 0..12 {
            let n_bus = 3;
            let buses: Vec<usize> = (0..3).map(|_| rng.random_range(0..n_bus)).collect();
            let g_max = rng.random_range(2.0..8.0);
            let r_cap = rng.random_range(1.0..6.0);
            let d_cap = rng.random_range(1.0..8.0);
            let line_cap = rng.random_range(1.0..5.0);
            let sys = GridSystem::new(
                n_bus,
                0,
                vec![
                    Branch { from: 0, to: 1, x: 0.1, capacity_mw: line_cap },
                    Branch { from: 1, to: 2, x: 0.15, capacity_mw: line_cap * 1.3 },
                    Branch { from: 0, to: 2, x: 0.08, capacity_mw: line_cap * 0.9 },
                ],
                vec![
                    entity(0, EntityKind::Thermal, buses[0], 0.9, g_max, 25.0),
                    entity(1, EntityKind::Renewable, buses[1], 0.0, r_cap, 0.0),
                    entity(2, EntityKind::Load, buses[2], 0.0, d_cap, 0.0),
                ],
            )
            .unwrap();
            let cond = OperatingConditions {
                t: 1,
                offers: vec![25.0],
                r_max: vec![r_cap],
                d_max: vec![d_cap],
                voll: 100.0,
            };
            let sol = solve_coalition(&sys, &cond, &Coalition::full(3)).unwrap();
            let oracle = grid_search_oracle(&sys, &cond, g_max, r_cap, d_cap);
            // The LP can only do better than any grid point; the grid can
            // miss the optimum by at most a step in each variable.
            assert!(
                sol.objective <= oracle + 1e-7,
                "case {case}: lp {} worse than grid {oracle}",
                sol.objective
            );
            assert!(
                oracle - sol.objective <= 0.02 * (cond.voll + 25.0),
                "case {case}: grid {oracle} too far above lp {}",
                sol.objective
            );
        }
    }

    #[test]
    fn random_solves_are_feasible_optimal_and_deterministic() {
        for seed in 0..8 {
            let sys = synthesize_system(3, 2, 4, 6, seed).unwrap();
            let sc = crate::grid::generate_scenario(&sys, 2, seed).unwrap();
            let cond = &sc.periods[1];
            let full = Coalition::full(sys.n_entities());
            let a = solve_coalition(&sys, cond, &full).unwrap();
            let b = solve_coalition(&sys, cond, &full).unwrap();
            assert_eq!(a.x_bits(), b.x_bits(), "seed {seed} not deterministic");
            assert!(a.optimality_residual <= OPTIMALITY_TOL);
            assert!((a.total_generation() - a.total_load()).abs() <= REPORT_TOL_MW);
        }
    }

    impl DispatchSolution {
        fn x_bits(&self) -> Vec<u64> {
            self.p_thermal
                .iter()
                .chain(&self.p_renewable)
                .chain(&self.p_load)
                .map(|v| v.to_bits())
                .collect()
        }
    }

    #[test]
    fn adding_a_renewable_never_raises_emissions() {
        let mut rng = crate::rng::stream(505, 0);
        for seed in 0..6 {
            let sys = synthesize_system(2, 2, 3, 5, seed + 100).unwrap();
            let sc = crate::grid::generate_scenario(&sys, 13, seed).unwrap();
            let cond = &sc.periods[12];
            let n = sys.n_entities();
            for _ in 0..4 {
                let mask: usize = rng.random_range(0..(1 << n));
                let mut coalition = Coalition::from_mask(n, mask);
                for r in 2..4 {
                    coalition.remove(r);
                }
                let base = characteristic_emissions(&sys, cond, &coalition).unwrap();
                let mut with_r = coalition.clone();
                with_r.insert(2);
                let more = characteristic_emissions(&sys, cond, &with_r).unwrap();
                assert!(
                    more <= base + 1e-9,
                    "seed {seed}: adding renewable raised emissions {base} -> {more}"
                );
            }
        }
    }
}
