//! Per-period and horizon allocation drivers.
//!
//! One period is allocated by a [`MethodSpec`]: exact enumeration, kernel
//! sampling or the stratified baseline against the dispatch solver, or the
//! accelerated path in which the sampler queries a trained surrogate while
//! the efficiency constraint is pinned to the dispatch solver's
//! grand-coalition emissions. A horizon maps the same specification over a
//! scenario with one derived seed per period.

use crate::allocation::{AllocationResult, Method};
use crate::dcopf::characteristic_emissions;
use crate::error::{Error, Result};
use crate::grid::io::system_hash;
use crate::grid::{Coalition, GridSystem, OperatingConditions, Scenario};
use crate::rng::period_seed;
use crate::sampler::{
    kernelshap_allocate_with, stratified_mc_allocate, CharacteristicFn, KernelShapConfig,
    OpfOracle, Trajectory,
};
use crate::shapley::{exact_shapley, tabulate_characteristic};
use crate::surrogate::{predict_batch, SurrogateModel};

/// Characteristic function backed by a trained surrogate. Batch evaluation
/// runs the whole batch through the network in one pass.
pub struct SurrogateOracle<'a> {
    pub model: &'a SurrogateModel,
    pub cond: &'a OperatingConditions,
}

impl CharacteristicFn for SurrogateOracle<'_> {
    fn n_entities(&self) -> usize {
        self.model.n_entities()
    }

    fn eval(&self, coalition: &Coalition) -> Result<f64> {
        Ok(predict_batch(self.model, self.cond, std::slice::from_ref(coalition))?[0])
    }

    fn eval_batch(&self, coalitions: &[Coalition]) -> Result<Vec<f64>> {
        predict_batch(self.model, self.cond, coalitions)
    }
}

/// Wraps a game but reports a fixed grand-coalition value. The accelerated
/// path uses this to anchor the efficiency constraint to the dispatch
/// solver's emissions while all sampled coalitions go to the surrogate.
struct PinnedGrand<O: CharacteristicFn> {
    inner: O,
    grand: f64,
}

impl<O: CharacteristicFn> CharacteristicFn for PinnedGrand<O> {
    fn n_entities(&self) -> usize {
        self.inner.n_entities()
    }

    fn eval(&self, coalition: &Coalition) -> Result<f64> {
        self.inner.eval(coalition)
    }

    fn eval_batch(&self, coalitions: &[Coalition]) -> Result<Vec<f64>> {
        self.inner.eval_batch(coalitions)
    }

    fn grand_value(&self) -> Result<f64> {
        Ok(self.grand)
    }
}

/// Settings of the surrogate-accelerated allocation.
#[derive(Debug, Clone)]
pub struct SurroShapConfig {
    pub kernel: KernelShapConfig,
    /// Anchor the efficiency constraint to one true dispatch solve of the
    /// grand coalition instead of the surrogate's own prediction. On by
    /// default: it costs one solve per period and removes the surrogate's
    /// bias from the total that gets distributed.
    pub true_grand_value: bool,
}

impl Default for SurroShapConfig {
    fn default() -> Self {
        SurroShapConfig {
            kernel: KernelShapConfig::default(),
            true_grand_value: true,
        }
    }
}

/// Fails unless the model was trained for exactly this system.
pub fn check_model_matches(system: &GridSystem, model: &SurrogateModel) -> Result<()> {
    if model.meta.counts != system.counts() {
        return Err(Error::Argument(format!(
            "model trained for {:?} cannot serve a system with {:?}",
            model.meta.counts,
            system.counts()
        )));
    }
    let hash = system_hash(system);
    if model.meta.system_hash != hash {
        return Err(Error::Validation(vec![format!(
            "model was trained against system {} but this system hashes to {}; \
             retrain or pass the matching system file",
            &model.meta.system_hash[..12.min(model.meta.system_hash.len())],
            &hash[..12]
        )]));
    }
    Ok(())
}

/// Surrogate-accelerated allocation of one period, with the sampling
/// trajectory for convergence analysis.
pub fn surroshap_allocate_period_with(
    system: &GridSystem,
    model: &SurrogateModel,
    cond: &OperatingConditions,
    m_samples: u64,
    seed: u64,
    config: &SurroShapConfig,
) -> Result<(AllocationResult, Trajectory)> {
    cond.validate(system)?;
    check_model_matches(system, model)?;
    let surrogate = SurrogateOracle { model, cond };
    let grand = if config.true_grand_value {
        characteristic_emissions(system, cond, &Coalition::full(system.n_entities()))?
    } else {
        surrogate.grand_value()?
    };
    let oracle = PinnedGrand {
        inner: surrogate,
        grand,
    };
    let (mut alloc, trajectory) = kernelshap_allocate_with(&oracle, m_samples, seed, &config.kernel)?;
    alloc.method = Method::SurroShap;
    alloc.t = cond.t;
    Ok((alloc, trajectory))
}

/// Surrogate-accelerated allocation of one period under default settings.
pub fn surroshap_allocate_period(
    system: &GridSystem,
    model: &SurrogateModel,
    cond: &OperatingConditions,
    m_samples: u64,
    seed: u64,
) -> Result<AllocationResult> {
    let (alloc, _) = surroshap_allocate_period_with(
        system,
        model,
        cond,
        m_samples,
        seed,
        &SurroShapConfig::default(),
    )?;
    Ok(alloc)
}

/// How to allocate a single period.
pub enum MethodSpec<'a> {
    /// Full enumeration of all coalitions through the dispatch solver.
    Exact,
    /// Paired kernel-weighted sampling against the dispatch solver.
    KernelShap { samples: u64 },
    /// Stratified marginal-contribution sampling against the dispatch
    /// solver; `samples` is the per-entity marginal budget.
    Stratified { samples: u64 },
    /// Paired kernel-weighted sampling against a surrogate, efficiency
    /// pinned to one true dispatch solve.
    SurroShap {
        model: &'a SurrogateModel,
        samples: u64,
        config: SurroShapConfig,
    },
}

impl MethodSpec<'_> {
    pub fn method(&self) -> Method {
        match self {
            MethodSpec::Exact => Method::Exact,
            MethodSpec::KernelShap { .. } => Method::KernelShap,
            MethodSpec::Stratified { .. } => Method::Stratified,
            MethodSpec::SurroShap { .. } => Method::SurroShap,
        }
    }
}

/// Allocates one period with the given method. The result's period index is
/// taken from the conditions.
pub fn allocate_period(
    system: &GridSystem,
    cond: &OperatingConditions,
    spec: &MethodSpec<'_>,
    seed: u64,
) -> Result<AllocationResult> {
    cond.validate(system)?;
    let alloc = match spec {
        MethodSpec::Exact => {
            let table = tabulate_characteristic(system, cond)?;
            exact_shapley(&table)
        }
        MethodSpec::KernelShap { samples } => {
            let oracle = OpfOracle { system, cond };
            let (alloc, _) =
                kernelshap_allocate_with(&oracle, *samples, seed, &KernelShapConfig::default())?;
            alloc
        }
        MethodSpec::Stratified { samples } => {
            let oracle = OpfOracle { system, cond };
            stratified_mc_allocate(&oracle, *samples, seed)?
        }
        MethodSpec::SurroShap {
            model,
            samples,
            config,
        } => surroshap_allocate_period_with(system, model, cond, *samples, seed, config)?.0,
    };
    Ok(alloc.with_period(cond.t))
}

/// Allocations of every period of a scenario plus horizon aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonAllocation {
    pub periods: Vec<AllocationResult>,
    /// Per-entity sum over the horizon, tCO2eq.
    pub cumulative: Vec<f64>,
    /// Per-entity mean per period, tCO2eq.
    pub average: Vec<f64>,
    /// Sum of grand-coalition emissions over the horizon, tCO2eq.
    pub total_emissions: f64,
}

impl HorizonAllocation {
    pub fn from_periods(periods: Vec<AllocationResult>) -> Self {
        let n = periods.first().map_or(0, |a| a.x.len());
        let mut cumulative = vec![0.0; n];
        let mut total_emissions = 0.0;
        for a in &periods {
            for (c, x) in cumulative.iter_mut().zip(&a.x) {
                *c += x;
            }
            total_emissions += a.grand_emissions;
        }
        let t = periods.len().max(1) as f64;
        let average = cumulative.iter().map(|c| c / t).collect();
        HorizonAllocation {
            periods,
            cumulative,
            average,
            total_emissions,
        }
    }
}

/// Allocates every period of the scenario with the same method. Period `t`
/// runs under its own seed derived from `seed` and `t`, so single periods
/// can be reproduced in isolation.
pub fn allocate_horizon(
    system: &GridSystem,
    scenario: &Scenario,
    spec: &MethodSpec<'_>,
    seed: u64,
) -> Result<HorizonAllocation> {
    scenario.validate(system)?;
    let mut periods = Vec::with_capacity(scenario.periods.len());
    for cond in &scenario.periods {
        periods.push(allocate_period(system, cond, spec, period_seed(seed, cond.t))?);
    }
    Ok(HorizonAllocation::from_periods(periods))
}
