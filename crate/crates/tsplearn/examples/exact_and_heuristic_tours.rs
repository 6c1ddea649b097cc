//! Compare the exact oracles with the classical baselines on a batch of
//! small instances.
//!
//! ```text
//! cargo run --example exact_and_heuristic_tours
//! ```

use tsplearn::instances::{
    brute_force, derive_seed, generate_euclidean, greedy_nearest, held_karp, optimality_gap,
    random_tour, tour_length,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let instances = generate_euclidean(9, 20, 7)?;

    let mut greedy_gaps = Vec::new();
    let mut random_gaps = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let (hk_tour, hk_cost) = held_karp(inst)?;
        let (_, bf_cost) = brute_force(inst)?;
        assert!((hk_cost - bf_cost).abs() < 1e-9, "oracles disagree");

        let greedy = greedy_nearest(inst, i % inst.n())?;
        greedy_gaps.push(optimality_gap(tour_length(&greedy, inst)?, hk_cost)?);

        let random = random_tour(inst.n(), derive_seed(1, i as u64))?;
        random_gaps.push(optimality_gap(tour_length(&random, inst)?, hk_cost)?);

        if i == 0 {
            println!("instance 0 optimal tour: {:?} (length {:.6})", hk_tour.order(), hk_cost);
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("Held-Karp and brute force agree on all {} instances", instances.len());
    println!("nearest-neighbor mean gap: {:.3}%", mean(&greedy_gaps));
    println!("random-tour mean gap:      {:.3}%", mean(&random_gaps));
    Ok(())
}
