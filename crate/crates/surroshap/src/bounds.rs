//! A posteriori error bounds for sampled allocations.
//!
//! Two error sources are quantified separately and then added:
//!
//! * sampling error: how far the kernel-weighted estimate still is from its
//!   own limit, estimated by fitting a decaying power-law form to the
//!   deviations of tail checkpoints from an independently drawn anchor
//!   estimate;
//! * surrogate error: how far a surrogate-fed estimate drifts from the
//!   true-oracle estimate, propagated in closed form from the surrogate's
//!   measured per-entity conditional bias through the efficiency-constrained
//!   least-squares solve.

use crate::allocation::AllocationResult;
use crate::error::{Error, Result};
use crate::rng::mix64;
use crate::sampler::{
    kernel_size_distribution, kernelshap_allocate, kernelshap_allocate_with,
    log_spaced_checkpoints, CharacteristicFn, KernelShapConfig, Trajectory,
};
use crate::surrogate::SurrogateMetrics;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Off-diagonal entry of the expected indicator moment matrix: the
/// probability that two given entities are both in a kernel-drawn coalition.
pub fn expected_cross_moment(n: usize) -> Result<f64> {
    let dist = kernel_size_distribution(n)?;
    let mut o = 0.0;
    for z in 1..n {
        let z_f = z as f64;
        o += dist.probability(z) * z_f * (z_f - 1.0) / (n as f64 * (n as f64 - 1.0));
    }
    Ok(o)
}

/// Expected indicator moment matrix of the kernel distribution: every
/// diagonal entry is exactly 1/2 (each entity is in a coalition or in its
/// paired complement), off-diagonals are [`expected_cross_moment`].
pub fn expected_moment_matrix(n: usize) -> Result<DMatrix<f64>> {
    let o = expected_cross_moment(n)?;
    let mut a = DMatrix::from_element(n, n, o);
    for i in 0..n {
        a[(i, i)] = 0.5;
    }
    Ok(a)
}

/// Applies the efficiency-constrained solve's sensitivity to a moment-vector
/// perturbation, using the rank-one structure of the expected moment matrix.
///
/// For `A = (d - o) I + o 1 1ᵀ` the constrained estimate responds to a
/// perturbation `v` of the moment vector with `G v`, where
/// `G = A⁻¹ - (A⁻¹ 1 1ᵀ A⁻¹) / (1ᵀ A⁻¹ 1)`. `G` annihilates the all-ones
/// direction, so only the part of `v` that reshapes the allocation passes.
fn apply_expected_gain(n: usize, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != n {
        return Err(Error::Argument(format!(
            "perturbation of length {} for {n} entities",
            v.len()
        )));
    }
    let d = 0.5;
    let o = expected_cross_moment(n)?;
    let trailing = d + (n as f64 - 1.0) * o;
    let sum: f64 = v.iter().sum();
    let shift = o * sum / ((d - o) * trailing) + sum / (n as f64 * trailing);
    Ok(v.iter().map(|&vi| vi / (d - o) - shift).collect())
}

/// Propagates per-entity conditional surrogate bias into an allocation-error
/// bound.
///
/// `delta[i]` is the mean of (surrogate - truth) over coalitions containing
/// entity `i`. Under paired sampling every entity appears in exactly half
/// the sampled coalitions, so the moment vector is perturbed by `delta / 2`;
/// the returned value is the Euclidean norm of that perturbation pushed
/// through the constrained solve.
pub fn epsilon_bound(n: usize, delta: &[f64]) -> Result<f64> {
    let g = apply_expected_gain(n, &delta.iter().map(|d| d / 2.0).collect::<Vec<_>>())?;
    Ok(g.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// [`epsilon_bound`] fed from measured surrogate metrics. Entities that
/// never appeared in the evaluated split make the bias unmeasurable, which
/// is an error: regenerate the dataset rather than guess.
pub fn epsilon_from_metrics(metrics: &SurrogateMetrics) -> Result<f64> {
    let delta: Vec<f64> = metrics
        .conditional_mbe
        .iter()
        .enumerate()
        .map(|(i, m)| {
            m.ok_or_else(|| {
                Error::Argument(format!(
                    "entity {i} has no conditional bias measurement; \
                     evaluate on a split where every entity appears"
                ))
            })
        })
        .collect::<Result<_>>()?;
    epsilon_bound(delta.len(), &delta)
}

/// Saturating power-law form fitted to convergence deviations:
/// `phi(m) = lambda + kappa / (m^alpha ln(m + gamma))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub lambda: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Residual sum of squares at the optimum.
    pub rss: f64,
    pub n_points: usize,
}

impl PowerLawFit {
    pub fn evaluate(&self, m: f64) -> f64 {
        self.lambda + self.kappa / (m.powf(self.alpha) * (m + self.gamma).ln())
    }
}

fn model(theta: &[f64; 4], m: f64) -> f64 {
    theta[0] + theta[1] / (m.powf(theta[2]) * (m + theta[3]).ln())
}

fn clamp_params(theta: &mut [f64; 4], m_min: f64) {
    // The asymptote is a norm limit, so it cannot be negative; kappa >= 0
    // keeps the family a decay toward that asymptote from above, which is
    // the shape of deviations measured against an independent anchor.
    theta[0] = theta[0].max(0.0);
    theta[1] = theta[1].max(0.0);
    theta[2] = theta[2].clamp(1e-3, 2.0);
    // ln(m + gamma) must stay positive over the data.
    let gamma_floor = 1.0 - m_min + 1e-3;
    theta[3] = theta[3].max(gamma_floor);
}

fn rss_of(theta: &[f64; 4], points: &[(f64, f64)]) -> f64 {
    points
        .iter()
        .map(|&(m, phi)| {
            let r = model(theta, m) - phi;
            r * r
        })
        .sum()
}

/// Least-squares fit of the decaying power-law form by damped Gauss-Newton
/// from several starts. Parameters are kept in their domain (`lambda >= 0`,
/// `kappa >= 0`, `alpha` in (0, 2], `ln(m + gamma) > 0`), so the fitted
/// curve always decays toward its asymptote from above.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 8 {
        return Err(Error::Fit(format!(
            "fitting needs at least 8 tail points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(m, phi)| !(m > 0.0) || !phi.is_finite()) {
        return Err(Error::Fit("tail points must have m > 0 and finite phi".into()));
    }
    let m_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let phi_last = points.last().expect("nonempty").1;
    let phi_max = points.iter().map(|p| p.1).fold(0.0f64, f64::max);

    // A flat-zero trajectory needs no fitting and would only stress the
    // numerics; report immediate convergence.
    if phi_max <= 1e-15 {
        return Ok(PowerLawFit {
            lambda: 0.0,
            kappa: 0.0,
            alpha: 1.0,
            gamma: std::f64::consts::E,
            rss: 0.0,
            n_points: points.len(),
        });
    }

    let mut best: Option<PowerLawFit> = None;
    for &lambda0 in &[0.0, phi_last] {
        for &alpha0 in &[0.3, 0.5, 1.0] {
            let gamma0 = std::f64::consts::E;
            let (m0, phi0) = points[0];
            // Pass the curve through the first point for the initial kappa.
            let kappa0 = ((phi0 - lambda0) * m0.powf(alpha0) * (m0 + gamma0).ln()).max(0.0);
            let mut theta = [lambda0, kappa0, alpha0, gamma0];
            clamp_params(&mut theta, m_min);
            let fit = gauss_newton(theta, points, m_min);
            if best.as_ref().is_none_or(|b| fit.rss < b.rss) {
                best = Some(fit);
            }
        }
    }
    Ok(best.expect("at least one start"))
}

fn gauss_newton(mut theta: [f64; 4], points: &[(f64, f64)], m_min: f64) -> PowerLawFit {
    let k = points.len();
    let mut rss = rss_of(&theta, points);
    let mut damping = 1e-3;
    for _ in 0..200 {
        // Numeric Jacobian of the residuals, central differences.
        let mut jac = DMatrix::zeros(k, 4);
        let mut res = DVector::zeros(k);
        for (row, &(m, phi)) in points.iter().enumerate() {
            res[row] = model(&theta, m) - phi;
            for p in 0..4 {
                let h = 1e-6 * theta[p].abs().max(1e-6);
                let mut up = theta;
                up[p] += h;
                let mut down = theta;
                down[p] -= h;
                jac[(row, p)] = (model(&up, m) - model(&down, m)) / (2.0 * h);
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let mut stepped = false;
        for _ in 0..12 {
            let mut lhs = jtj.clone();
            for p in 0..4 {
                lhs[(p, p)] += damping * (1.0 + jtj[(p, p)].abs());
            }
            let Some(chol) = lhs.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let mut candidate = theta;
            for p in 0..4 {
                candidate[p] += step[p];
            }
            clamp_params(&mut candidate, m_min);
            let candidate_rss = rss_of(&candidate, points);
            if candidate_rss.is_finite() && candidate_rss <= rss {
                let step_norm = step.norm();
                theta = candidate;
                let improved = rss - candidate_rss;
                rss = candidate_rss;
                damping = (damping / 3.0).max(1e-12);
                stepped = true;
                if step_norm <= 1e-12 || improved <= 1e-16 * (1.0 + rss) {
                    return finish(theta, rss, k);
                }
                break;
            }
            damping *= 10.0;
        }
        if !stepped {
            break;
        }
    }
    finish(theta, rss, k)
}

fn finish(theta: [f64; 4], rss: f64, n_points: usize) -> PowerLawFit {
    PowerLawFit {
        lambda: theta[0],
        kappa: theta[1],
        alpha: theta[2],
        gamma: theta[3],
        rss,
        n_points,
    }
}

/// Sampling-error estimate extracted from convergence measurements.
///
/// The anchor estimate is computed from its own draw stream, independent of
/// the run under measurement. Deviations of the tail checkpoints from that
/// anchor then decay, as the checkpoints converge, toward the anchor's own
/// remaining error; the fitted asymptote of that decay is the estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaEstimate {
    /// Fitted asymptotic deviation from the independent anchor estimate,
    /// used as the sampling-error component of the total budget.
    pub eta: f64,
    /// `eta` relative to the norm of the final estimate.
    pub relative: f64,
    pub anchor_samples: u64,
    pub fit: PowerLawFit,
    /// The fitted (samples-past-anchor, deviation) pairs.
    pub points: Vec<(f64, f64)>,
}

/// Settings of the trajectory-tail analysis.
#[derive(Debug, Clone, Copy)]
pub struct EtaConfig {
    /// Fraction of the sample budget treated as the tail window.
    pub tail_fraction: f64,
    /// Checkpoints requested across the tail window.
    pub checkpoints: usize,
    /// Fewer tail points than this is a fitting error.
    pub min_tail_points: usize,
}

impl Default for EtaConfig {
    fn default() -> Self {
        EtaConfig {
            tail_fraction: 0.10,
            checkpoints: 100,
            min_tail_points: 8,
        }
    }
}

fn even_floor(v: u64) -> u64 {
    v - v % 2
}

/// Stream salt separating the anchor run's draws from the measured run's.
const ANCHOR_SALT: u64 = u64::from_le_bytes(*b"etanchor");

/// Tail-window schedule for [`estimate_eta`]: the anchor sample count for
/// the independent reference run, and the log-spaced checkpoints past it
/// that the measured run records.
pub fn eta_checkpoints(m_samples: u64, config: &EtaConfig) -> Result<(u64, Vec<u64>)> {
    if !(config.tail_fraction > 0.0 && config.tail_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "tail fraction must be in (0, 1), got {}",
            config.tail_fraction
        )));
    }
    let anchor = even_floor((m_samples as f64 * (1.0 - config.tail_fraction)) as u64).max(2);
    if m_samples < anchor + 2 * config.min_tail_points as u64 {
        return Err(Error::Argument(format!(
            "budget {m_samples} leaves no room for {} tail checkpoints after the anchor at {anchor}",
            config.min_tail_points
        )));
    }
    Ok((anchor, log_spaced_checkpoints(anchor, m_samples, config.checkpoints)))
}

/// Extracts the sampling-error estimate from an anchor allocation and a
/// trajectory recorded by an independent run.
///
/// Deviations of every trajectory point past the anchor's sample count are
/// fitted with [`fit_power_law`]; the fitted asymptote is the estimate.
pub fn eta_from_runs(
    anchor: &AllocationResult,
    trajectory: &Trajectory,
    config: &EtaConfig,
) -> Result<EtaEstimate> {
    let pts = &trajectory.points;
    let Some(last) = pts.last() else {
        return Err(Error::Fit("the trajectory is empty".into()));
    };
    if last.x.len() != anchor.x.len() {
        return Err(Error::Argument(format!(
            "anchor has {} entities but the trajectory has {}",
            anchor.x.len(),
            last.x.len()
        )));
    }
    let tail: Vec<&crate::sampler::TrajectoryPoint> =
        pts.iter().filter(|p| p.samples > anchor.samples).collect();
    if tail.len() < config.min_tail_points {
        return Err(Error::Fit(format!(
            "only {} checkpoints past the anchor at {} samples; need at least {}",
            tail.len(),
            anchor.samples,
            config.min_tail_points
        )));
    }
    let points: Vec<(f64, f64)> = tail
        .iter()
        .map(|p| {
            let m = (p.samples - anchor.samples) as f64;
            let phi = p
                .x
                .iter()
                .zip(&anchor.x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (m, phi)
        })
        .collect();
    let fit = fit_power_law(&points)?;
    let norm = last.norm();
    Ok(EtaEstimate {
        eta: fit.lambda,
        relative: if norm > 0.0 { fit.lambda / norm } else { f64::INFINITY },
        anchor_samples: anchor.samples,
        fit,
        points,
    })
}

/// Runs the kernel sampler twice, once for the allocation with tail
/// checkpoints recorded and once, on a separate stream, for the anchor
/// estimate the checkpoints are measured against, and returns the
/// allocation together with the sampling-error estimate.
pub fn estimate_eta(
    oracle: &dyn CharacteristicFn,
    m_samples: u64,
    seed: u64,
    config: &EtaConfig,
) -> Result<(AllocationResult, EtaEstimate)> {
    let (anchor_samples, checkpoints) = eta_checkpoints(m_samples, config)?;
    let kernel = KernelShapConfig {
        checkpoints,
        ..KernelShapConfig::default()
    };
    let (alloc, trajectory) = kernelshap_allocate_with(oracle, m_samples, seed, &kernel)?;
    let anchor = kernelshap_allocate(oracle, anchor_samples, mix64(seed, ANCHOR_SALT))?;
    let eta = eta_from_runs(&anchor, &trajectory, config)?;
    Ok((alloc, eta))
}

/// Combined error budget of one allocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBudget {
    /// Sampling-error component.
    pub eta: f64,
    /// Surrogate-error component; zero when the true oracle was sampled.
    pub epsilon: f64,
    /// `eta + epsilon`.
    pub total: f64,
    /// Norm the relative figure is taken against.
    pub x_norm: f64,
    /// `total / x_norm`.
    pub relative: f64,
}

/// Adds the two error components and expresses them relative to the norm of
/// the allocation they describe.
pub fn total_bound(eta: f64, epsilon: f64, x_norm: f64) -> ErrorBudget {
    let total = eta + epsilon;
    let relative = if x_norm > 0.0 {
        total / x_norm
    } else if total == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    ErrorBudget {
        eta,
        epsilon,
        total,
        x_norm,
        relative,
    }
}

/// The fitted tail as CSV: offset from the anchor, measured deviation,
/// fitted deviation.
pub fn fit_to_csv(estimate: &EtaEstimate) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["m", "phi", "fitted"]).expect("in-memory write");
    for &(m, phi) in &estimate.points {
        w.write_record([
            m.to_string(),
            phi.to_string(),
            estimate.fit.evaluate(m).to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
}
