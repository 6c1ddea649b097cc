//! Unsupervised learning for the traveling salesman problem.
//!
//! The crate turns the subtour-elimination formulation of TSP into a
//! differentiable penalty loss over relaxed edge-membership matrices, so
//! that tours can be found — and a graph neural network trained — without
//! any solved instances:
//!
//! * [`instances`] — instance generation, exact oracles (Held-Karp and
//!   brute force), nearest-neighbor and random baselines, optimality gaps,
//!   and newline-delimited dataset files.
//! * [`subtour`] — relaxed solution matrices and the parametric
//!   connectivity heuristic that finds node subsets violating the cut
//!   constraint.
//! * [`loss`] — the penalty loss, its analytic gradient, and
//!   Gumbel-softmax conversion of edge logits into solutions.
//! * [`diffcore`] — a minimal reverse-mode autodiff engine on dense `f64`
//!   tensors, two-affine-layer perceptrons, Adam, gradient checking, and
//!   text checkpoints.
//! * [`gnn`] — the message-passing encoder with gated edge updates and the
//!   edge-logit decoder.
//! * [`solver`] — greedy tour decoding, per-instance direct loss
//!   minimization, the training loop, and evaluation.
//! * [`cli`] — the command implementations behind the `tsplearn` binary.
//!
//! The `examples/` directory has one runnable walkthrough per capability;
//! start with `cargo run --example generate_datasets`.

pub mod cli;
pub mod diffcore;
pub mod gnn;
pub mod instances;
pub mod loss;
pub mod matrix;
pub mod solver;
pub mod subtour;

#[cfg(test)]
pub(crate) mod testutil;

pub use instances::{Tour, TspInstance};
pub use loss::{EdgeLogits, LossWeights};
pub use matrix::SquareMatrix;
pub use subtour::{SolutionMatrix, ViolationSet};
