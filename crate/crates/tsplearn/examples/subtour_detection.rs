//! Find node subsets whose cuts violate the subtour constraint, first on
//! an integer solution made of two disjoint cycles, then on a random
//! fractional solution.
//!
//! ```text
//! cargo run --example subtour_detection
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsplearn::matrix::SquareMatrix;
use tsplearn::subtour::{cut_value, parametric_connectivity, SolutionMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Two disjoint directed cycles on 6 nodes: {0,1,2} and {3,4,5}.
    let mut m = SquareMatrix::zeros(6);
    for cycle in [[0usize, 1, 2], [3, 4, 5]] {
        for k in 0..3 {
            m.set(cycle[k], cycle[(k + 1) % 3], 1.0);
        }
    }
    let x = SolutionMatrix::new(m)?;
    println!("two disjoint 3-cycles:");
    for v in &parametric_connectivity(&x)?.entries {
        println!("  subset {:?} {:?}-cut = {:.3}  (violates cut >= 1)", v.subset, v.direction, v.cut);
    }

    // A random fractional solution: whatever comes back is confirmed
    // against a direct cut computation.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = SolutionMatrix::new(SquareMatrix::from_fn(8, |i, j| {
        if i == j {
            0.0
        } else {
            rng.gen::<f64>() * 0.4
        }
    }))?;
    let violations = parametric_connectivity(&x)?;
    println!("random fractional solution on 8 nodes: {} violations", violations.len());
    for v in violations.entries.iter().take(4) {
        let recomputed = cut_value(&x, &v.subset, v.direction)?;
        println!(
            "  subset {:?} {:?}-cut = {:.3} (recomputed {:.3})",
            v.subset, v.direction, v.cut, recomputed
        );
    }

    // A full tour has no violations at all.
    let tour = tsplearn::instances::Tour::new((0..8).collect())?;
    let x = SolutionMatrix::from_tour(&tour);
    println!("full tour violations: {}", parametric_connectivity(&x)?.len());
    Ok(())
}
