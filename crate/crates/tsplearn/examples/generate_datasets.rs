//! Generate Euclidean and asymmetric instance files, annotate them with
//! exact optima, and read them back.
//!
//! ```text
//! cargo run --example generate_datasets
//! ```

use tsplearn::instances::{
    generate_asymmetric, generate_euclidean, held_karp, read_dataset, write_dataset,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("tsplearn_example_datasets");
    std::fs::create_dir_all(&dir)?;

    // Euclidean: points in the unit square, symmetric distance matrix.
    let euclid_path = dir.join("tsp8.ndj");
    let mut euclid = generate_euclidean(8, 16, 42)?;
    for inst in &mut euclid {
        let (tour, cost) = held_karp(inst)?;
        *inst = inst.clone().with_optimum(cost, Some(tour))?;
    }
    write_dataset(&euclid_path, &euclid)?;

    // Asymmetric: independent uniform weights per direction, no coordinates.
    let asym_path = dir.join("atsp8.ndj");
    let asym = generate_asymmetric(8, 16, 42)?;
    write_dataset(&asym_path, &asym)?;

    let back = read_dataset(&euclid_path)?;
    println!("wrote {} annotated Euclidean instances to {}", back.len(), euclid_path.display());
    println!("wrote {} asymmetric instances to {}", asym.len(), asym_path.display());

    let first = &back[0];
    println!(
        "first instance: n = {}, optimal tour length {:.6}",
        first.n(),
        first.opt_len().unwrap()
    );
    println!(
        "weights are reconstructed from coordinates losslessly: {}",
        first.weights() == euclid[0].weights()
    );

    // Identical seeds give byte-identical files.
    let again_path = dir.join("tsp8_again.ndj");
    write_dataset(&again_path, &{
        let mut again = generate_euclidean(8, 16, 42)?;
        for inst in &mut again {
            let (tour, cost) = held_karp(inst)?;
            *inst = inst.clone().with_optimum(cost, Some(tour))?;
        }
        again
    })?;
    println!(
        "regeneration with the same seed is byte-identical: {}",
        std::fs::read(&euclid_path)? == std::fs::read(&again_path)?
    );
    Ok(())
}
