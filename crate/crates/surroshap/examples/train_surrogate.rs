//! Generates a labeled dispatch dataset, trains the feed-forward surrogate
//! on it and reports held-out accuracy.

use surroshap::grid::synthesize_system;
use surroshap::surrogate::{
    evaluate_metrics, generate_dataset, predict_features, train, Split, TrainConfig,
};

fn main() -> Result<(), surroshap::Error> {
    let system = synthesize_system(4, 2, 4, 8, 11)?;

    // Rows pair random operating conditions with random coalitions and
    // label them with the dispatch solver's emissions. 70/20/10 split.
    let dataset = generate_dataset(&system, 20_000, 5)?;
    println!(
        "dataset: {} rows x {} features ({} train / {} val / {} test)",
        dataset.n_samples(),
        dataset.n_features(),
        dataset.indices_of(Split::Train).len(),
        dataset.indices_of(Split::Val).len(),
        dataset.indices_of(Split::Test).len()
    );

    let config = TrainConfig {
        hidden: vec![64, 64],
        epochs: 30,
        ..TrainConfig::default()
    };
    let model = train(&dataset, &config)?;

    println!("\nepoch    lr         train loss    val loss");
    for r in model.meta.history.iter().step_by(5) {
        println!(
            "{:>5}    {:.2e}   {:>10.5}    {:>8.5}",
            r.epoch,
            r.learning_rate,
            r.train_loss,
            r.val_loss.unwrap_or(f64::NAN)
        );
    }

    for (name, split) in [("val", Split::Val), ("test", Split::Test)] {
        let m = evaluate_metrics(&model, &dataset, split)?;
        println!(
            "\n{name}: rmse {:.5}  mbe {:+.5}  r2 {:.5} over {} rows",
            m.rmse, m.mbe, m.r_squared, m.n_rows
        );
    }

    // A few raw predictions against their labels.
    println!("\nsample predictions (test split):");
    let test = dataset.indices_of(Split::Test);
    for &i in test.iter().take(5) {
        let pred = predict_features(&model, dataset.row(i))?[0];
        println!(
            "  label {:>10.4}   predicted {:>10.4}",
            dataset.label(i),
            pred
        );
    }
    Ok(())
}
