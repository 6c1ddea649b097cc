//! Shared helpers for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::instances::Tour;
use crate::matrix::SquareMatrix;
use crate::subtour::SolutionMatrix;

/// Random fractional solution with entries in `[0, 1)`.
pub(crate) fn random_solution(n: usize, seed: u64) -> SolutionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = SquareMatrix::from_fn(n, |i, j| if i == j { 0.0 } else { rng.gen::<f64>() });
    SolutionMatrix::new(x).unwrap()
}

/// Random solution with entries in `[0.05, 0.95]`, so small finite-difference
/// perturbations stay inside the valid range.
pub(crate) fn random_interior_solution(n: usize, seed: u64) -> SolutionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = SquareMatrix::from_fn(n, |i, j| {
        if i == j {
            0.0
        } else {
            rng.gen_range(0.05..=0.95)
        }
    });
    SolutionMatrix::new(x).unwrap()
}

/// Every directed Hamiltonian cycle with node 0 first.
pub(crate) fn all_tours(n: usize) -> Vec<Tour> {
    fn recurse(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Tour>) {
        let n = used.len();
        if prefix.len() == n {
            out.push(Tour::new(prefix.clone()).unwrap());
            return;
        }
        for v in 1..n {
            if !used[v] {
                used[v] = true;
                prefix.push(v);
                recurse(prefix, used, out);
                prefix.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    let mut used = vec![false; n];
    used[0] = true;
    recurse(&mut vec![0], &mut used, &mut out);
    out
}
