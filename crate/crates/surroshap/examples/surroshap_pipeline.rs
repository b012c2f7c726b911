//! The full accelerated pipeline: train a surrogate once, then allocate a
//! whole horizon through it and compare against the exact answer.

use std::time::Instant;

use surroshap::grid::{generate_scenario, synthesize_system};
use surroshap::pipeline::{allocate_horizon, MethodSpec, SurroShapConfig};
use surroshap::surrogate::{evaluate_metrics, generate_dataset, train, Split, TrainConfig};

fn main() -> Result<(), surroshap::Error> {
    let system = synthesize_system(3, 2, 3, 6, 42)?;
    let scenario = generate_scenario(&system, 24, 7)?;

    // One-time cost: label 30k random (conditions, coalition) rows with the
    // dispatch solver and fit the network. Every allocation after this
    // reuses the same weights.
    let t0 = Instant::now();
    let dataset = generate_dataset(&system, 30_000, 5)?;
    let model = train(
        &dataset,
        &TrainConfig {
            hidden: vec![64, 64],
            epochs: 40,
            ..TrainConfig::default()
        },
    )?;
    let metrics = evaluate_metrics(&model, &dataset, Split::Test)?;
    println!(
        "surrogate trained in {:.1?}: test r2 {:.5}, rmse {:.5}",
        t0.elapsed(),
        metrics.r_squared,
        metrics.rmse
    );

    let samples = 20_000;
    let spec = MethodSpec::SurroShap {
        model: &model,
        samples,
        config: SurroShapConfig::default(),
    };
    let t1 = Instant::now();
    let fast = allocate_horizon(&system, &scenario, &spec, 1)?;
    let fast_time = t1.elapsed();

    let t2 = Instant::now();
    let exact = allocate_horizon(&system, &scenario, &MethodSpec::Exact, 1)?;
    let exact_time = t2.elapsed();

    println!(
        "\n24-period horizon: surroshap {:.1?} ({} samples/period), exact {:.1?}",
        fast_time, samples, exact_time
    );
    println!("\ncumulative responsibility over the horizon, tCO2eq:");
    println!("  entity      exact        surroshap");
    for i in 0..system.n_entities() {
        println!(
            "  #{i:<4}  {:>12.4}  {:>12.4}",
            exact.cumulative[i], fast.cumulative[i]
        );
    }

    let diff: f64 = fast
        .cumulative
        .iter()
        .zip(&exact.cumulative)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = exact.cumulative.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!(
        "\nrelative L2 distance {:.4}%  |  both horizons total {:.3} tCO2eq",
        100.0 * diff / norm,
        exact.total_emissions
    );
    // The totals agree exactly: each period's efficiency constraint is
    // anchored to one true dispatch solve, so surrogate bias never leaks
    // into how much gets distributed, only into how it is split.
    assert!((fast.total_emissions - exact.total_emissions).abs() < 1e-9);
    Ok(())
}
