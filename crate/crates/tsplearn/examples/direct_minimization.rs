//! Solve single instances by minimizing the relaxed loss directly with
//! Adam, then decode the relaxation greedily into a tour.
//!
//! ```text
//! cargo run --example direct_minimization
//! ```

use tsplearn::instances::{brute_force, generate_euclidean, optimality_gap, tour_length};
use tsplearn::loss::{tsp_loss, LossWeights};
use tsplearn::solver::{direct_minimize, greedy_decode};
use tsplearn::subtour::parametric_connectivity;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let weights = LossWeights::euclidean();
    let instances = generate_euclidean(10, 5, 21)?;

    for (i, inst) in instances.iter().enumerate() {
        let (_, opt) = brute_force(inst)?;

        // Loss at the starting point (uniform relaxation, 0 steps).
        let x0 = direct_minimize(inst, 0, 0.01, 0.0, i as u64)?;
        let s0 = parametric_connectivity(&x0)?;
        let initial = tsp_loss(&x0, inst, &s0, &weights)?;

        let x = direct_minimize(inst, 2000, 0.01, 0.0, i as u64)?;
        let s = parametric_connectivity(&x)?;
        let final_loss = tsp_loss(&x, inst, &s, &weights)?;

        let tour = greedy_decode(&x, 0)?;
        let gap = optimality_gap(tour_length(&tour, inst)?, opt)?;
        println!(
            "instance {i}: loss {initial:8.2} -> {final_loss:8.2}, decoded gap {gap:6.3}% \
             (optimum {opt:.4})"
        );
    }
    Ok(())
}
