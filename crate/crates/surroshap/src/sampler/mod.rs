//! Coalition sampling estimators for Shapley allocations.
//!
//! The main estimator is KernelSHAP: coalitions are drawn from the Shapley
//! kernel in paired complements, accumulated into second-moment statistics,
//! and resolved into an allocation by an efficiency-constrained weighted
//! least-squares solve. A stratified Monte Carlo estimator of the classical
//! marginal-contribution form serves as a comparison baseline.
//!
//! Both estimators consume the characteristic function through the
//! [`CharacteristicFn`] trait, so the same machinery runs against the true
//! dispatch solver, a precomputed table, or a learned surrogate.

mod distribution;
mod engine;
mod stratified;

pub use distribution::{kernel_size_distribution, SizeDistribution};
pub use engine::{
    kernelshap_allocate, kernelshap_allocate_with, log_spaced_checkpoints, solve_constrained_wls,
    KernelShapConfig, SamplerState, Trajectory, TrajectoryPoint,
};
pub use stratified::stratified_mc_allocate;

use crate::dcopf::characteristic_emissions;
use crate::error::Result;
use crate::grid::{Coalition, GridSystem, OperatingConditions};
use crate::shapley::CharacteristicTable;
use rayon::prelude::*;

/// A coalition game: maps each coalition to its emissions value.
///
/// Implementations must be pure functions of the coalition so that repeated
/// evaluation is safe and batches may be evaluated in parallel.
pub trait CharacteristicFn: Sync {
    fn n_entities(&self) -> usize;

    fn eval(&self, coalition: &Coalition) -> Result<f64>;

    /// Evaluates a batch, preserving input order. The default implementation
    /// fans out across the current rayon pool; the output is identical for
    /// any worker count.
    fn eval_batch(&self, coalitions: &[Coalition]) -> Result<Vec<f64>> {
        coalitions.par_iter().map(|s| self.eval(s)).collect()
    }

    /// Value of the full coalition, the total an allocation must distribute.
    fn grand_value(&self) -> Result<f64> {
        self.eval(&Coalition::full(self.n_entities()))
    }
}

/// Characteristic function backed by the real dispatch solver: every
/// evaluation is one coalition-restricted optimal power flow.
pub struct OpfOracle<'a> {
    pub system: &'a GridSystem,
    pub cond: &'a OperatingConditions,
}

impl CharacteristicFn for OpfOracle<'_> {
    fn n_entities(&self) -> usize {
        self.system.n_entities()
    }

    fn eval(&self, coalition: &Coalition) -> Result<f64> {
        characteristic_emissions(self.system, self.cond, coalition)
    }
}

/// Characteristic function backed by a fully enumerated table. Evaluation is
/// a lookup, which makes large-sample statistical tests affordable.
pub struct TableOracle<'a> {
    pub table: &'a CharacteristicTable,
}

impl CharacteristicFn for TableOracle<'_> {
    fn n_entities(&self) -> usize {
        self.table.n()
    }

    fn eval(&self, coalition: &Coalition) -> Result<f64> {
        Ok(self.table.value(coalition.to_mask()))
    }
}

/// Wraps another game and shifts every coalition's value by the sum of
/// per-member offsets. Used to study estimators under a known, structured
/// evaluation error.
pub struct ShiftedOracle<'a> {
    pub inner: &'a dyn CharacteristicFn,
    pub shift: Vec<f64>,
}

impl CharacteristicFn for ShiftedOracle<'_> {
    fn n_entities(&self) -> usize {
        self.inner.n_entities()
    }

    fn eval(&self, coalition: &Coalition) -> Result<f64> {
        let mut v = self.inner.eval(coalition)?;
        for (i, s) in self.shift.iter().enumerate() {
            if coalition.contains(i) {
                v += s;
            }
        }
        Ok(v)
    }
}

/// Characteristic function defined by a closure, for synthetic games.
pub struct FnOracle<F: Fn(&Coalition) -> f64 + Sync> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(&Coalition) -> f64 + Sync> CharacteristicFn for FnOracle<F> {
    fn n_entities(&self) -> usize {
        self.n
    }

    fn eval(&self, coalition: &Coalition) -> Result<f64> {
        Ok((self.f)(coalition))
    }
}
