//! Power transfer distribution factors for the DC approximation.

use crate::error::{Error, Result};
use crate::grid::Branch;
use nalgebra::DMatrix;

/// Sensitivity of each branch flow to a unit injection at each bus,
/// withdrawn at the slack bus. Row `f`, column `b`; the slack column is
/// exactly zero.
///
/// Fails with a topology error when some buses cannot reach the slack bus
/// through the branch set.
pub fn compute_ptdf(n_bus: usize, branches: &[Branch], slack_bus: usize) -> Result<DMatrix<f64>> {
    let unreachable = unreachable_buses(n_bus, branches, slack_bus);
    if !unreachable.is_empty() {
        return Err(Error::Validation(vec![format!(
            "network is disconnected: buses {unreachable:?} cannot reach slack bus {slack_bus}"
        )]));
    }
    let n_br = branches.len();
    let mut ptdf = DMatrix::zeros(n_br, n_bus);
    if n_bus == 1 || n_br == 0 {
        return Ok(ptdf);
    }

    // Nodal susceptance matrix with the slack row/column removed.
    let keep: Vec<usize> = (0..n_bus).filter(|&b| b != slack_bus).collect();
    let pos_of = |b: usize| keep.binary_search(&b).ok();
    let m = n_bus - 1;
    let mut b_red = DMatrix::<f64>::zeros(m, m);
    for br in branches {
        let y = 1.0 / br.x;
        if let Some(i) = pos_of(br.from) {
            b_red[(i, i)] += y;
        }
        if let Some(j) = pos_of(br.to) {
            b_red[(j, j)] += y;
        }
        if let (Some(i), Some(j)) = (pos_of(br.from), pos_of(br.to)) {
            b_red[(i, j)] -= y;
            b_red[(j, i)] -= y;
        }
    }
    let inv = b_red.lu().try_inverse().ok_or_else(|| {
        Error::Numeric("reduced susceptance matrix is singular despite a connected topology".into())
    })?;

    // Flow on branch f per unit angle difference, chained through the
    // inverse: ptdf[f, b] = (e_from - e_to)^T B^-1 e_b / x_f.
    for (f, br) in branches.iter().enumerate() {
        for (col, &b) in keep.iter().enumerate() {
            let from_term = pos_of(br.from).map_or(0.0, |i| inv[(i, col)]);
            let to_term = pos_of(br.to).map_or(0.0, |j| inv[(j, col)]);
            ptdf[(f, b)] = (from_term - to_term) / br.x;
        }
    }
    Ok(ptdf)
}

/// Buses with no path to the slack bus.
fn unreachable_buses(n_bus: usize, branches: &[Branch], slack_bus: usize) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n_bus];
    for br in branches {
        if br.from < n_bus && br.to < n_bus {
            adj[br.from].push(br.to);
            adj[br.to].push(br.from);
        }
    }
    let mut seen = vec![false; n_bus];
    if slack_bus < n_bus {
        let mut queue = std::collections::VecDeque::from([slack_bus]);
        seen[slack_bus] = true;
        while let Some(b) = queue.pop_front() {
            for &next in &adj[b] {
                if !seen[next] {
                    seen[next] = true;
                    queue.push_back(next);
                }
            }
        }
    }
    (0..n_bus).filter(|&b| !seen[b]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn branch(from: usize, to: usize, x: f64) -> Branch {
        Branch {
            from,
            to,
            x,
            capacity_mw: 100.0,
        }
    }

    #[test]
    fn two_bus_line_carries_the_whole_injection() {
        let ptdf = compute_ptdf(2, &[branch(0, 1, 0.1)], 0).unwrap();
        // Injection at bus 1 flows toward the slack, against the branch
        // orientation 0 -> 1.
        assert_abs_diff_eq!(ptdf[(0, 1)], -1.0, epsilon = 1e-12);
        assert_eq!(ptdf[(0, 0)], 0.0);
    }

    #[test]
    fn equal_reactance_ring_splits_two_to_one() {
        let branches = vec![branch(0, 1, 0.1), branch(1, 2, 0.1), branch(0, 2, 0.1)];
        let ptdf = compute_ptdf(3, &branches, 0).unwrap();
        // Unit injection at bus 1: the direct path (one line) takes 2/3,
        // the detour through bus 2 (two lines) takes 1/3.
        assert_abs_diff_eq!(ptdf[(0, 1)], -2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ptdf[(1, 1)], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ptdf[(2, 1)], -1.0 / 3.0, epsilon = 1e-12);
        for f in 0..3 {
            assert_eq!(ptdf[(f, 0)], 0.0);
        }
    }

    #[test]
    fn entries_stay_within_unit_magnitude() {
        let branches = vec![
            branch(0, 1, 0.07),
            branch(1, 2, 0.19),
            branch(2, 3, 0.05),
            branch(3, 0, 0.11),
            branch(1, 3, 0.13),
        ];
        let ptdf = compute_ptdf(4, &branches, 2).unwrap();
        for f in 0..5 {
            for b in 0..4 {
                assert!(ptdf[(f, b)].abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn disconnected_network_names_the_unreachable_buses() {
        let err = compute_ptdf(4, &[branch(0, 1, 0.1)], 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("disconnected"), "{msg}");
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn single_bus_has_no_rows() {
        let ptdf = compute_ptdf(1, &[], 0).unwrap();
        assert_eq!((ptdf.nrows(), ptdf.ncols()), (0, 1));
    }
}
