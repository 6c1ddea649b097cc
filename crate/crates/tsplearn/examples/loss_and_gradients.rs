//! The relaxed loss by hand: evaluate it at an optimal tour matrix, at
//! the uniform relaxation, check its analytic gradient against finite
//! differences, and watch Gumbel noise leave saturated edges alone.
//!
//! ```text
//! cargo run --example loss_and_gradients
//! ```

use tsplearn::instances::{brute_force, generate_euclidean};
use tsplearn::loss::{gumbel_softmax_edges, tsp_loss, tsp_loss_grad, EdgeLogits, LossWeights};
use tsplearn::matrix::SquareMatrix;
use tsplearn::subtour::{parametric_connectivity, SolutionMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let inst = generate_euclidean(7, 1, 11)?.remove(0);
    let weights = LossWeights::euclidean();
    let (opt_tour, opt_cost) = brute_force(&inst)?;

    // At the optimal tour matrix all penalties vanish.
    let x = SolutionMatrix::from_tour(&opt_tour);
    let s = parametric_connectivity(&x)?;
    let loss = tsp_loss(&x, &inst, &s, &weights)?;
    println!("loss at the optimal tour: {loss:.6} = alpha * {opt_cost:.6}");

    // The uniform relaxation satisfies the degree constraints exactly.
    let x = SolutionMatrix::uniform(7);
    let s = parametric_connectivity(&x)?;
    println!(
        "loss at the uniform relaxation: {:.6} ({} violations)",
        tsp_loss(&x, &inst, &s, &weights)?,
        s.len()
    );

    // Analytic gradient vs central differences on one coordinate.
    let x = SolutionMatrix::new(SquareMatrix::from_fn(7, |i, j| {
        if i == j {
            0.0
        } else {
            0.3 + 0.05 * ((i * 7 + j) % 7) as f64
        }
    }))?;
    let s = parametric_connectivity(&x)?;
    let grad = tsp_loss_grad(&x, &inst, &s, &weights)?;
    let (i, j) = (2, 5);
    let step = 1e-6;
    let eval = |delta: f64| {
        let mut m = x.matrix().clone();
        m.set(i, j, m.get(i, j) + delta);
        tsp_loss(&SolutionMatrix::new(m).unwrap(), &inst, &s, &weights).unwrap()
    };
    let fd = (eval(step) - eval(-step)) / (2.0 * step);
    println!(
        "dL/dx[{i}][{j}]: analytic {:.9}, finite differences {:.9}",
        grad.get(i, j),
        fd
    );

    // Gumbel noise perturbs undecided edges but not saturated ones.
    let mut logits = EdgeLogits::zeros(4);
    logits.class1_mut().set(0, 1, 20.0); // saturated on
    logits.class1_mut().set(1, 2, 0.2); // undecided
    let a = gumbel_softmax_edges(&logits, 0.1, 1);
    let b = gumbel_softmax_edges(&logits, 0.1, 2);
    println!(
        "saturated edge under two noise draws: {:.9} / {:.9}",
        a.get(0, 1),
        b.get(0, 1)
    );
    println!(
        "undecided edge under two noise draws: {:.6} / {:.6}",
        a.get(1, 2),
        b.get(1, 2)
    );
    Ok(())
}
