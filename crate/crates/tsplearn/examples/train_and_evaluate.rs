//! Train a small model without labels, save the checkpoint, reload it,
//! and evaluate against exact optima.
//!
//! ```text
//! cargo run --example train_and_evaluate
//! ```

use tsplearn::gnn::GnnModel;
use tsplearn::instances::{generate_euclidean, held_karp, write_dataset};
use tsplearn::loss::LossWeights;
use tsplearn::solver::{evaluate, train, InstanceKind, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("tsplearn_example_training");
    std::fs::create_dir_all(&dir)?;

    // 32 validation instances with exact optima.
    let val_path = dir.join("val.ndj");
    let mut validation = generate_euclidean(8, 32, 500)?;
    for inst in &mut validation {
        let (tour, cost) = held_karp(inst)?;
        *inst = inst.clone().with_optimum(cost, Some(tour))?;
    }
    write_dataset(&val_path, &validation)?;

    let config = TrainConfig {
        epochs: 3,
        epoch_size: 1024,
        batch_size: 64,
        learning_rate: 1e-3,
        n: 8,
        kind: InstanceKind::Euclidean,
        d: 16,
        layers: 2,
        loss_weights: LossWeights::euclidean(),
        seed: 1,
        validation_path: val_path,
        checkpoint_path: dir.join("model.ckpt"),
        best_checkpoint_path: dir.join("model_best.ckpt"),
        metrics_path: dir.join("metrics.csv"),
    };
    let outcome = train(&config)?;
    println!(
        "trained {} parameters; best epoch {}",
        outcome.model.parameter_count(),
        outcome.best_epoch
    );

    // Reload the checkpoint and evaluate it.
    let model = GnnModel::load(&config.checkpoint_path)?;
    let report = evaluate(&model, &validation, 9)?;
    println!(
        "reloaded checkpoint: mean gap {:.3}% over {} instances in {:.2}s",
        report.mean_gap_percent,
        report.per_instance.len(),
        report.total_seconds
    );
    println!("metrics written to {}", config.metrics_path.display());
    Ok(())
}
