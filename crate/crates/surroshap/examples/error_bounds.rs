//! Builds the a posteriori error budget for a sampled allocation: a
//! convergence-tail fit bounds the sampling error, measured surrogate bias
//! bounds the acceleration error, and the exact answer shows the bound
//! holding.

use surroshap::bounds::{epsilon_from_metrics, estimate_eta, total_bound, EtaConfig};
use surroshap::grid::{generate_scenario, synthesize_system};
use surroshap::pipeline::SurrogateOracle;
use surroshap::shapley::{exact_shapley, tabulate_characteristic};
use surroshap::surrogate::{evaluate_metrics, generate_dataset, train, Split, TrainConfig};

fn main() -> Result<(), surroshap::Error> {
    let system = synthesize_system(3, 2, 3, 6, 42)?;
    let scenario = generate_scenario(&system, 1, 7)?;
    let cond = &scenario.periods[0];

    let dataset = generate_dataset(&system, 30_000, 5)?;
    let model = train(
        &dataset,
        &TrainConfig {
            hidden: vec![64, 64],
            epochs: 40,
            ..TrainConfig::default()
        },
    )?;

    // Sampling error: rerun the tail of the trajectory against an anchor
    // estimate from an independent stream and fit the decay of the
    // deviations; the fitted asymptote is the eta component.
    let samples = 200_000;
    let (allocation, eta) = estimate_eta(
        &SurrogateOracle { model: &model, cond },
        samples,
        3,
        &EtaConfig::default(),
    )?;
    println!(
        "eta: {:.5} from a {}-point tail fit past the {}-sample anchor",
        eta.eta,
        eta.points.len(),
        eta.anchor_samples
    );
    println!(
        "     fitted curve: {:.5} + {:.3} / (m^{:.3} ln(m + {:.3}))",
        eta.fit.lambda, eta.fit.kappa, eta.fit.alpha, eta.fit.gamma
    );

    // Surrogate error: per-entity conditional bias on the held-out test
    // split, propagated through the kernel estimator's closed form.
    let metrics = evaluate_metrics(&model, &dataset, Split::Test)?;
    let epsilon = epsilon_from_metrics(&metrics)?;
    println!("epsilon: {epsilon:.5} from the test-split conditional bias");

    let x_norm = allocation.x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let budget = total_bound(eta.eta, epsilon, x_norm);
    println!(
        "total bound: {:.5} ({:.3}% of the estimate norm)",
        budget.total,
        100.0 * budget.relative
    );

    // The system is small enough to check the bound against the truth.
    let exact = exact_shapley(&tabulate_characteristic(&system, cond)?);
    let true_error = allocation
        .x
        .iter()
        .zip(&exact.x)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    println!(
        "\ntrue error vs exact: {:.5}  ({})",
        true_error,
        if true_error <= budget.total {
            "within the budget"
        } else {
            "outside the budget"
        }
    );
    Ok(())
}
