//! Network and entity model.
//!
//! A system is a DC network (buses, branches with reactance and thermal
//! limit, a slack bus, a PTDF matrix) plus a list of entities attached to its
//! buses. Entities are indexed densely `0..n` in kind order thermal,
//! renewable, load, which lets the rest of the crate address kind blocks as
//! contiguous slices and keeps allocation vectors position-stable.

mod coalition;
pub mod io;
mod ptdf;
mod scenario;
mod synth;

pub use coalition::Coalition;
pub use ptdf::compute_ptdf;
pub use scenario::{generate_scenario, generate_scenario_with_voll, diurnal_factor};
pub use synth::synthesize_system;

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Default value of lost load, used when synthesis or generation does not
/// override it. Keeps shedding strictly dominated by any plausible offer.
pub const DEFAULT_VOLL: f64 = 10_000.0;

/// Largest PTDF magnitude accepted as physical (1 plus roundoff).
const PTDF_MAGNITUDE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Thermal,
    Renewable,
    Load,
}

impl std::fmt::Display for EntityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EntityKind::Thermal => "thermal",
            EntityKind::Renewable => "renewable",
            EntityKind::Load => "load",
        };
        f.write_str(s)
    }
}

/// One participant in the allocation game.
///
/// `beta` (tCO2eq/MWh) and `base_offer` ($/MWh) are zero for everything but
/// thermal units. `p_max` is generation capacity for generators and nominal
/// peak demand for loads; the per-period ceiling comes from the scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: usize,
    pub kind: EntityKind,
    pub bus: usize,
    pub beta: f64,
    pub p_max: f64,
    pub base_offer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series reactance, per unit. Must be positive.
    pub x: f64,
    /// Flow limit, MW, applied in both directions.
    pub capacity_mw: f64,
}

/// DC network topology with its injection-shift sensitivities.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub n_bus: usize,
    pub slack_bus: usize,
    pub branches: Vec<Branch>,
    /// `n_branch x n_bus`; column `slack_bus` is exactly zero.
    pub ptdf: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub thermal: usize,
    pub renewable: usize,
    pub load: usize,
}

impl EntityCounts {
    pub fn total(&self) -> usize {
        self.thermal + self.renewable + self.load
    }
}

/// A validated network plus entity list. Construction enforces every model
/// invariant, so downstream code can index without re-checking.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSystem {
    pub network: Network,
    pub entities: Vec<Entity>,
    counts: EntityCounts,
}

impl GridSystem {
    /// Builds a system, computing the PTDF from the topology.
    pub fn new(
        n_bus: usize,
        slack_bus: usize,
        branches: Vec<Branch>,
        entities: Vec<Entity>,
    ) -> Result<Self> {
        let mut failures = validate_topology(n_bus, slack_bus, &branches);
        failures.extend(validate_entities(&entities, n_bus));
        if !failures.is_empty() {
            return Err(Error::Validation(failures));
        }
        let ptdf = compute_ptdf(n_bus, &branches, slack_bus)?;
        let network = Network {
            n_bus,
            slack_bus,
            branches,
            ptdf,
        };
        Ok(GridSystem {
            counts: count_entities(&entities),
            network,
            entities,
        })
    }

    /// Builds a system from parts that already carry a PTDF, validating the
    /// matrix against one recomputed from the topology.
    pub fn with_ptdf(
        n_bus: usize,
        slack_bus: usize,
        branches: Vec<Branch>,
        entities: Vec<Entity>,
        ptdf: DMatrix<f64>,
    ) -> Result<Self> {
        let system = Self::new(n_bus, slack_bus, branches, entities)?;
        let mut failures = Vec::new();
        if ptdf.nrows() != system.network.ptdf.nrows() || ptdf.ncols() != system.network.ptdf.ncols()
        {
            failures.push(format!(
                "ptdf has shape {}x{}, expected {}x{}",
                ptdf.nrows(),
                ptdf.ncols(),
                system.network.ptdf.nrows(),
                system.network.ptdf.ncols()
            ));
            return Err(Error::Validation(failures));
        }
        for f in 0..ptdf.nrows() {
            if ptdf[(f, slack_bus)] != 0.0 {
                failures.push(format!(
                    "ptdf row {f} has nonzero slack-bus column ({})",
                    ptdf[(f, slack_bus)]
                ));
            }
        }
        let mut max_dev = 0.0f64;
        for f in 0..ptdf.nrows() {
            for b in 0..ptdf.ncols() {
                if ptdf[(f, b)].abs() > 1.0 + PTDF_MAGNITUDE_TOL {
                    failures.push(format!(
                        "ptdf entry ({f},{b}) = {} exceeds unit magnitude",
                        ptdf[(f, b)]
                    ));
                }
                max_dev = max_dev.max((ptdf[(f, b)] - system.network.ptdf[(f, b)]).abs());
            }
        }
        if max_dev > 1e-6 {
            failures.push(format!(
                "provided ptdf disagrees with the one implied by the topology (max deviation {max_dev:.3e})"
            ));
        }
        if !failures.is_empty() {
            return Err(Error::Validation(failures));
        }
        Ok(system)
    }

    pub fn n_entities(&self) -> usize {
        self.counts.total()
    }

    pub fn counts(&self) -> EntityCounts {
        self.counts
    }

    /// Thermal block, ids `0..counts.thermal`.
    pub fn thermals(&self) -> &[Entity] {
        &self.entities[..self.counts.thermal]
    }

    /// Renewable block, ids `counts.thermal..counts.thermal + counts.renewable`.
    pub fn renewables(&self) -> &[Entity] {
        let lo = self.counts.thermal;
        &self.entities[lo..lo + self.counts.renewable]
    }

    /// Load block, the final `counts.load` ids.
    pub fn loads(&self) -> &[Entity] {
        &self.entities[self.counts.thermal + self.counts.renewable..]
    }

    /// Position of a renewable entity inside the renewable block.
    pub fn renewable_local(&self, id: usize) -> usize {
        id - self.counts.thermal
    }

    /// Position of a load entity inside the load block.
    pub fn load_local(&self, id: usize) -> usize {
        id - self.counts.thermal - self.counts.renewable
    }

    pub fn kind_of(&self, id: usize) -> EntityKind {
        self.entities[id].kind
    }
}

fn count_entities(entities: &[Entity]) -> EntityCounts {
    EntityCounts {
        thermal: entities
            .iter()
            .filter(|e| e.kind == EntityKind::Thermal)
            .count(),
        renewable: entities
            .iter()
            .filter(|e| e.kind == EntityKind::Renewable)
            .count(),
        load: entities
            .iter()
            .filter(|e| e.kind == EntityKind::Load)
            .count(),
    }
}

fn validate_topology(n_bus: usize, slack_bus: usize, branches: &[Branch]) -> Vec<String> {
    let mut failures = Vec::new();
    if n_bus == 0 {
        failures.push("system must have at least one bus".to_string());
        return failures;
    }
    if slack_bus >= n_bus {
        failures.push(format!(
            "slack_bus {slack_bus} out of range for {n_bus} buses"
        ));
    }
    for (f, br) in branches.iter().enumerate() {
        if br.from >= n_bus || br.to >= n_bus {
            failures.push(format!(
                "branch {f} endpoints ({}, {}) out of range for {n_bus} buses",
                br.from, br.to
            ));
        }
        if br.from == br.to {
            failures.push(format!("branch {f} is a self-loop at bus {}", br.from));
        }
        if !(br.x > 0.0 && br.x.is_finite()) {
            failures.push(format!("branch {f} reactance {} must be positive", br.x));
        }
        if !(br.capacity_mw > 0.0 && br.capacity_mw.is_finite()) {
            failures.push(format!(
                "branch {f} capacity {} must be positive",
                br.capacity_mw
            ));
        }
    }
    failures
}

fn validate_entities(entities: &[Entity], n_bus: usize) -> Vec<String> {
    let mut failures = Vec::new();
    if entities.is_empty() {
        failures.push("system must have at least one entity".to_string());
        return failures;
    }
    let mut last_kind_rank = 0u8;
    for (pos, e) in entities.iter().enumerate() {
        if e.id != pos {
            failures.push(format!(
                "entity at position {pos} has id {}; ids must be dense and ascending",
                e.id
            ));
        }
        let rank = match e.kind {
            EntityKind::Thermal => 0,
            EntityKind::Renewable => 1,
            EntityKind::Load => 2,
        };
        if rank < last_kind_rank {
            failures.push(format!(
                "entity {} breaks the kind order thermal, renewable, load",
                e.id
            ));
        }
        last_kind_rank = last_kind_rank.max(rank);
        if e.bus >= n_bus {
            failures.push(format!(
                "entity {} sits on bus {} but the system has {n_bus} buses",
                e.id, e.bus
            ));
        }
        if !(e.p_max > 0.0 && e.p_max.is_finite()) {
            failures.push(format!(
                "entity {} p_max {} must be positive",
                e.id, e.p_max
            ));
        }
        match e.kind {
            EntityKind::Thermal => {
                if !(e.beta >= 0.0 && e.beta.is_finite()) {
                    failures.push(format!(
                        "thermal {} beta {} must be nonnegative",
                        e.id, e.beta
                    ));
                }
                if !(e.base_offer >= 0.0 && e.base_offer.is_finite()) {
                    failures.push(format!(
                        "thermal {} base_offer {} must be nonnegative",
                        e.id, e.base_offer
                    ));
                }
            }
            EntityKind::Renewable | EntityKind::Load => {
                if e.beta != 0.0 {
                    failures.push(format!(
                        "{} {} must have beta 0, found {}",
                        e.kind, e.id, e.beta
                    ));
                }
                if e.base_offer != 0.0 {
                    failures.push(format!(
                        "{} {} must have base_offer 0, found {}",
                        e.kind, e.id, e.base_offer
                    ));
                }
            }
        }
    }
    failures
}

/// Per-period inputs of the dispatch problem.
///
/// `offers`, `r_max`, `d_max` are indexed by position inside the thermal,
/// renewable and load blocks respectively. `t` is the 1-based period index.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingConditions {
    pub t: usize,
    pub offers: Vec<f64>,
    pub r_max: Vec<f64>,
    pub d_max: Vec<f64>,
    pub voll: f64,
}

impl OperatingConditions {
    pub fn validate(&self, system: &GridSystem) -> Result<()> {
        let counts = system.counts();
        let mut failures = Vec::new();
        if self.t == 0 {
            failures.push("period index t is 1-based".to_string());
        }
        if self.offers.len() != counts.thermal {
            failures.push(format!(
                "period {}: {} offers for {} thermal units",
                self.t,
                self.offers.len(),
                counts.thermal
            ));
        }
        if self.r_max.len() != counts.renewable {
            failures.push(format!(
                "period {}: {} r_max entries for {} renewables",
                self.t,
                self.r_max.len(),
                counts.renewable
            ));
        }
        if self.d_max.len() != counts.load {
            failures.push(format!(
                "period {}: {} d_max entries for {} loads",
                self.t,
                self.d_max.len(),
                counts.load
            ));
        }
        for (i, v) in self.offers.iter().enumerate() {
            if !(*v >= 0.0 && v.is_finite()) {
                failures.push(format!("period {}: offer {i} = {v} invalid", self.t));
            }
        }
        for (i, v) in self.r_max.iter().enumerate() {
            if !(*v >= 0.0 && v.is_finite()) {
                failures.push(format!("period {}: r_max {i} = {v} invalid", self.t));
            }
        }
        for (i, v) in self.d_max.iter().enumerate() {
            if !(*v >= 0.0 && v.is_finite()) {
                failures.push(format!("period {}: d_max {i} = {v} invalid", self.t));
            }
        }
        let max_offer = self.offers.iter().cloned().fold(0.0f64, f64::max);
        if !(self.voll > max_offer) {
            failures.push(format!(
                "period {}: voll {} must exceed the largest offer {max_offer}",
                self.t, self.voll
            ));
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(failures))
        }
    }
}

/// An ordered horizon of operating conditions.
///
/// `seed` is kept when the scenario was generated in-process; scenarios read
/// back from files carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub periods: Vec<OperatingConditions>,
    pub seed: Option<u64>,
}

impl Scenario {
    pub fn validate(&self, system: &GridSystem) -> Result<()> {
        let mut failures = Vec::new();
        if self.periods.is_empty() {
            failures.push("scenario has no periods".to_string());
        }
        for (k, p) in self.periods.iter().enumerate() {
            if p.t != k + 1 {
                failures.push(format!(
                    "period at position {k} has t = {}, expected {}",
                    p.t,
                    k + 1
                ));
            }
            if let Err(Error::Validation(mut inner)) = p.validate(system) {
                failures.append(&mut inner);
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(failures))
        }
    }
}
