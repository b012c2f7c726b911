//! Revised simplex for box-bounded linear programs.
//!
//! Two-phase method with explicit variable bounds: nonbasic variables rest at
//! a finite bound, ranged rows get a bounded slack, infeasibility is priced
//! out through artificials. Entering and leaving choices follow Bland's
//! smallest-index rule, which prevents cycling under degeneracy; every
//! iteration refactors the small basis, trading speed for drift-free
//! numerics. Deterministic: no randomness, no iteration-order ambiguity.

use crate::dcopf::lp::LinearProgram;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Bound and row violations are held below this after a solve.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// A solution is optimal when no reduced cost is favorable beyond this.
pub const OPTIMALITY_TOL: f64 = 1e-7;

const PRICE_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const RATIO_TIE_TOL: f64 = 1e-12;
const MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct SimplexSolution {
    /// Structural variable values.
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Largest still-favorable reduced cost at termination; the optimality
    /// certificate residual.
    pub optimality_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarState {
    Basic,
    AtLower,
    AtUpper,
}

struct Tableau {
    m: usize,
    /// Sparse columns over all variables: structural, slacks, artificials.
    cols: Vec<Vec<(usize, f64)>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    b: Vec<f64>,
    state: Vec<VarState>,
    basis: Vec<usize>,
    n_artificials: usize,
}

pub fn solve(lp: &LinearProgram) -> Result<SimplexSolution> {
    debug_assert_eq!(lp.objective.len(), lp.n_vars);
    debug_assert_eq!(lp.lower.len(), lp.n_vars);
    debug_assert_eq!(lp.upper.len(), lp.n_vars);
    let mut tab = Tableau::build(lp)?;
    let mut iterations = 0;

    if tab.n_artificials > 0 {
        let mut phase1_cost = vec![0.0; tab.cols.len()];
        for j in tab.cols.len() - tab.n_artificials..tab.cols.len() {
            phase1_cost[j] = 1.0;
        }
        iterations += tab.optimize(&phase1_cost, MAX_ITERATIONS, "phase 1")?;
        let infeasibility: f64 = tab
            .basic_values()?
            .iter()
            .zip(&tab.basis)
            .filter(|(_, &j)| tab.is_artificial(j))
            .map(|(v, _)| v.abs())
            .sum();
        if infeasibility > OPTIMALITY_TOL {
            return Err(Error::Infeasible {
                context: "phase 1 could not eliminate artificial flow".into(),
                phase1_objective: infeasibility,
            });
        }
        tab.fix_artificials();
    }

    let mut cost = vec![0.0; tab.cols.len()];
    cost[..lp.n_vars].copy_from_slice(&lp.objective);
    iterations += tab.optimize(&cost, MAX_ITERATIONS.saturating_sub(iterations), "phase 2")?;

    let values = tab.all_values()?;
    let x: Vec<f64> = values[..lp.n_vars].to_vec();
    tab.check_feasible(&values)?;
    let objective = lp
        .objective
        .iter()
        .zip(&x)
        .map(|(c, v)| c * v)
        .sum::<f64>();
    let optimality_residual = tab.optimality_residual(&cost)?;
    if optimality_residual > OPTIMALITY_TOL {
        return Err(Error::Solver(format!(
            "terminated with favorable reduced cost {optimality_residual:.3e} above {OPTIMALITY_TOL:.0e}"
        )));
    }
    Ok(SimplexSolution {
        x,
        objective,
        iterations,
        optimality_residual,
    })
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Result<Self> {
        let n_eq = lp.equalities.len();
        let m = n_eq + lp.ranges.len();
        let n_struct = lp.n_vars;
        let n_slack = lp.ranges.len();

        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_struct + n_slack];
        let mut b = vec![0.0; m];
        for (r, row) in lp.equalities.iter().enumerate() {
            b[r] = row.rhs;
            for &(j, a) in &row.coeffs {
                if a != 0.0 {
                    cols[j].push((r, a));
                }
            }
        }
        for (k, row) in lp.ranges.iter().enumerate() {
            let r = n_eq + k;
            for &(j, a) in &row.coeffs {
                if a != 0.0 {
                    cols[j].push((r, a));
                }
            }
            cols[n_struct + k].push((r, -1.0));
        }

        let mut lower = lp.lower.clone();
        let mut upper = lp.upper.clone();
        for row in &lp.ranges {
            lower.push(row.lo);
            upper.push(row.hi);
        }

        let mut state = Vec::with_capacity(cols.len());
        for j in 0..n_struct {
            let (lo, hi) = (lower[j], upper[j]);
            if !lo.is_finite() && !hi.is_finite() {
                return Err(Error::Solver(format!(
                    "variable x{j} is free; box-bounded problems expected"
                )));
            }
            let at_lower = lo.is_finite() && (!hi.is_finite() || lo.abs() <= hi.abs());
            state.push(if at_lower {
                VarState::AtLower
            } else {
                VarState::AtUpper
            });
        }
        // Slack states are provisional; the range-row scan below decides
        // whether each starts basic or at a bound.
        state.resize(n_struct + n_slack, VarState::AtLower);

        // Row activity of the structural start point decides which rows need
        // an artificial and where range slacks start.
        let mut activity = vec![0.0; m];
        for j in 0..n_struct {
            let v = match state[j] {
                VarState::AtLower => lower[j],
                VarState::AtUpper => upper[j],
                VarState::Basic => unreachable!(),
            };
            if v != 0.0 {
                for &(r, a) in &cols[j] {
                    activity[r] += a * v;
                }
            }
        }

        let mut basis = vec![usize::MAX; m];
        let mut n_artificials = 0;
        for r in 0..n_eq {
            let residual = b[r] - activity[r];
            let sign = if residual >= 0.0 { 1.0 } else { -1.0 };
            cols.push(vec![(r, sign)]);
            lower.push(0.0);
            upper.push(f64::INFINITY);
            state.push(VarState::Basic);
            basis[r] = cols.len() - 1;
            n_artificials += 1;
        }
        for (k, row) in lp.ranges.iter().enumerate() {
            let r = n_eq + k;
            let slack = n_struct + k;
            if activity[r] >= row.lo && activity[r] <= row.hi {
                state[slack] = VarState::Basic;
                basis[r] = slack;
            } else {
                state[slack] = if activity[r] < row.lo {
                    VarState::AtLower
                } else {
                    VarState::AtUpper
                };
                let slack_value = match state[slack] {
                    VarState::AtLower => row.lo,
                    _ => row.hi,
                };
                // Row reads activity - s + sign*a = 0, so the artificial
                // a = (s - activity)/sign starts basic and nonnegative.
                let residual = slack_value - activity[r];
                let sign = if residual >= 0.0 { 1.0 } else { -1.0 };
                cols.push(vec![(r, sign)]);
                lower.push(0.0);
                upper.push(f64::INFINITY);
                state.push(VarState::Basic);
                basis[r] = cols.len() - 1;
                n_artificials += 1;
            }
        }
        debug_assert!(state.len() == cols.len());

        Ok(Tableau {
            m,
            cols,
            lower,
            upper,
            b,
            state,
            basis,
            n_artificials,
        })
    }

    fn is_artificial(&self, j: usize) -> bool {
        j >= self.cols.len() - self.n_artificials
    }

    /// After phase 1, artificials are pinned to zero so phase 2 can never
    /// move them again.
    fn fix_artificials(&mut self) {
        let first = self.cols.len() - self.n_artificials;
        for j in first..self.cols.len() {
            self.upper[j] = 0.0;
        }
    }

    fn nonbasic_value(&self, j: usize) -> f64 {
        match self.state[j] {
            VarState::AtLower => self.lower[j],
            VarState::AtUpper => self.upper[j],
            VarState::Basic => unreachable!("basic variable has no bound value"),
        }
    }

    fn basis_matrix(&self) -> DMatrix<f64> {
        let mut mat = DMatrix::zeros(self.m, self.m);
        for (k, &j) in self.basis.iter().enumerate() {
            for &(r, a) in &self.cols[j] {
                mat[(r, k)] = a;
            }
        }
        mat
    }

    /// Right-hand side net of nonbasic contributions.
    fn net_rhs(&self) -> DVector<f64> {
        let mut rhs = DVector::from_column_slice(&self.b);
        for (j, col) in self.cols.iter().enumerate() {
            if self.state[j] != VarState::Basic {
                let v = self.nonbasic_value(j);
                if v != 0.0 {
                    for &(r, a) in col {
                        rhs[r] -= a * v;
                    }
                }
            }
        }
        rhs
    }

    fn basic_values(&self) -> Result<DVector<f64>> {
        if self.m == 0 {
            return Ok(DVector::zeros(0));
        }
        self.basis_matrix()
            .lu()
            .solve(&self.net_rhs())
            .ok_or_else(|| Error::Numeric("singular basis matrix".into()))
    }

    fn all_values(&self) -> Result<Vec<f64>> {
        let x_b = self.basic_values()?;
        let mut values: Vec<f64> = (0..self.cols.len())
            .map(|j| match self.state[j] {
                VarState::Basic => 0.0,
                _ => self.nonbasic_value(j),
            })
            .collect();
        for (k, &j) in self.basis.iter().enumerate() {
            values[j] = x_b[k];
        }
        Ok(values)
    }

    fn duals(&self, cost: &[f64]) -> Result<DVector<f64>> {
        if self.m == 0 {
            return Ok(DVector::zeros(0));
        }
        let c_b = DVector::from_iterator(self.m, self.basis.iter().map(|&j| cost[j]));
        self.basis_matrix()
            .transpose()
            .lu()
            .solve(&c_b)
            .ok_or_else(|| Error::Numeric("singular basis matrix (dual solve)".into()))
    }

    fn reduced_cost(&self, j: usize, cost: &[f64], y: &DVector<f64>) -> f64 {
        let mut d = cost[j];
        for &(r, a) in &self.cols[j] {
            d -= y[r] * a;
        }
        d
    }

    /// Runs simplex iterations under `cost` until no favorable nonbasic
    /// direction remains. Returns the number of iterations.
    fn optimize(&mut self, cost: &[f64], budget: usize, phase: &str) -> Result<usize> {
        for iteration in 0..budget {
            let y = self.duals(cost)?;

            // Bland: first nonbasic, non-fixed variable with favorable
            // reduced cost enters.
            let mut entering = None;
            for j in 0..self.cols.len() {
                if self.state[j] == VarState::Basic || self.lower[j] == self.upper[j] {
                    continue;
                }
                let d = self.reduced_cost(j, cost, &y);
                let favorable = match self.state[j] {
                    VarState::AtLower => d < -PRICE_TOL,
                    VarState::AtUpper => d > PRICE_TOL,
                    VarState::Basic => false,
                };
                if favorable {
                    entering = Some(j);
                    break;
                }
            }
            let Some(q) = entering else {
                return Ok(iteration);
            };
            let dir = if self.state[q] == VarState::AtLower {
                1.0
            } else {
                -1.0
            };

            // Basic variables move by -dir * theta * w.
            let x_b = self.basic_values()?;
            let w = if self.m == 0 {
                DVector::zeros(0)
            } else {
                let mut a_q = DVector::zeros(self.m);
                for &(r, a) in &self.cols[q] {
                    a_q[r] = a;
                }
                self.basis_matrix()
                    .lu()
                    .solve(&a_q)
                    .ok_or_else(|| Error::Numeric("singular basis matrix (direction)".into()))?
            };

            let span = self.upper[q] - self.lower[q];
            let mut theta = span;
            for k in 0..self.m {
                let delta = dir * w[k];
                let bj = self.basis[k];
                let limit = if delta > PIVOT_TOL {
                    (x_b[k] - self.lower[bj]) / delta
                } else if delta < -PIVOT_TOL {
                    (x_b[k] - self.upper[bj]) / delta
                } else {
                    continue;
                };
                theta = theta.min(limit.max(0.0));
            }
            if !theta.is_finite() {
                return Err(Error::Solver(format!(
                    "{phase}: unbounded direction on variable x{q}"
                )));
            }

            if span.is_finite() && span <= theta + RATIO_TIE_TOL {
                // Bound flip: q crosses to its other bound, basis unchanged.
                self.state[q] = match self.state[q] {
                    VarState::AtLower => VarState::AtUpper,
                    VarState::AtUpper => VarState::AtLower,
                    VarState::Basic => unreachable!(),
                };
                continue;
            }

            // Leaving row: among ratio-test ties, smallest variable index
            // with an acceptable pivot magnitude; fall back to the largest
            // pivot when all tied pivots are tiny.
            let mut candidates: Vec<usize> = Vec::new();
            for k in 0..self.m {
                let delta = dir * w[k];
                let bj = self.basis[k];
                let limit = if delta > PIVOT_TOL {
                    (x_b[k] - self.lower[bj]) / delta
                } else if delta < -PIVOT_TOL {
                    (x_b[k] - self.upper[bj]) / delta
                } else {
                    continue;
                };
                if limit.max(0.0) <= theta + RATIO_TIE_TOL {
                    candidates.push(k);
                }
            }
            let leave_k = candidates
                .iter()
                .copied()
                .filter(|&k| w[k].abs() >= PIVOT_TOL)
                .min_by_key(|&k| self.basis[k])
                .or_else(|| {
                    candidates.iter().copied().max_by(|&a, &b| {
                        w[a].abs()
                            .partial_cmp(&w[b].abs())
                            .expect("pivot magnitudes are finite")
                    })
                })
                .ok_or_else(|| {
                    Error::Solver(format!(
                        "{phase}: no admissible pivot for entering variable x{q}"
                    ))
                })?;

            let leaving = self.basis[leave_k];
            self.state[leaving] = if dir * w[leave_k] > 0.0 {
                VarState::AtLower
            } else {
                VarState::AtUpper
            };
            self.basis[leave_k] = q;
            self.state[q] = VarState::Basic;
        }
        Err(Error::Solver(format!(
            "{phase}: iteration limit {MAX_ITERATIONS} reached"
        )))
    }

    fn optimality_residual(&self, cost: &[f64]) -> Result<f64> {
        let y = self.duals(cost)?;
        let mut worst = 0.0f64;
        for j in 0..self.cols.len() {
            if self.state[j] == VarState::Basic || self.lower[j] == self.upper[j] {
                continue;
            }
            let d = self.reduced_cost(j, cost, &y);
            let favorable = match self.state[j] {
                VarState::AtLower => (-d).max(0.0),
                VarState::AtUpper => d.max(0.0),
                VarState::Basic => 0.0,
            };
            worst = worst.max(favorable);
        }
        Ok(worst)
    }

    fn check_feasible(&self, values: &[f64]) -> Result<()> {
        for (j, &v) in values.iter().enumerate() {
            if v < self.lower[j] - FEASIBILITY_TOL || v > self.upper[j] + FEASIBILITY_TOL {
                return Err(Error::Numeric(format!(
                    "variable x{j} = {v} violates [{}, {}]",
                    self.lower[j], self.upper[j]
                )));
            }
        }
        for r in 0..self.m {
            let mut activity = 0.0;
            for (j, col) in self.cols.iter().enumerate() {
                for &(rr, a) in col {
                    if rr == r {
                        activity += a * values[j];
                    }
                }
            }
            if (activity - self.b[r]).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "row {r} residual {} above reporting tolerance",
                    activity - self.b[r]
                )));
            }
        }
        Ok(())
    }
}
