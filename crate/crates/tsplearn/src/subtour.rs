//! Subtour-violation detection on relaxed solutions.
//!
//! A relaxed solution assigns each directed edge a membership value in
//! `[0, 1]`. A node subset `Q` violates the cut form of the subtour
//! constraint when the total membership crossing between `Q` and the rest
//! of the graph falls below 1 in either direction. Enumerating all subsets
//! is exponential; [`parametric_connectivity`] inspects only the subsets
//! that arise as merged components while edges are added in decreasing
//! weight order, which is where violations concentrate.

use thiserror::Error;

use crate::instances::Tour;
use crate::matrix::SquareMatrix;

#[derive(Debug, Error)]
pub enum SubtourError {
    #[error("solution entry ({i},{j}) = {value} outside [0,1]")]
    EntryOutOfRange { i: usize, j: usize, value: f64 },
    #[error("solution diagonal entry ({i},{i}) = {value} must be exactly 0")]
    NonZeroDiagonal { i: usize, value: f64 },
    #[error("subset must be a proper non-empty node set (|q| = {size}, n = {n})")]
    InvalidSubsetSize { size: usize, n: usize },
    #[error("subset contains node {node} twice or out of range (n = {n})")]
    InvalidSubsetNode { node: usize, n: usize },
    #[error("solution must have at least {min} nodes, got {got}")]
    TooSmall { min: usize, got: usize },
}

/// A relaxed edge-membership matrix: entries in `[0, 1]`, zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionMatrix {
    x: SquareMatrix,
}

impl SolutionMatrix {
    /// Validates entries and the zero diagonal.
    pub fn new(x: SquareMatrix) -> Result<Self, SubtourError> {
        let n = x.n();
        for i in 0..n {
            let d = x.get(i, i);
            if d != 0.0 {
                return Err(SubtourError::NonZeroDiagonal { i, value: d });
            }
            for j in 0..n {
                let v = x.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(SubtourError::EntryOutOfRange { i, j, value: v });
                }
            }
        }
        Ok(Self { x })
    }

    /// The 0/1 matrix of a full tour: entry `(v, next(v))` is 1.
    pub fn from_tour(tour: &Tour) -> Self {
        let n = tour.len();
        let mut x = SquareMatrix::zeros(n);
        let order = tour.order();
        for k in 0..n {
            x.set(order[k], order[(k + 1) % n], 1.0);
        }
        Self { x }
    }

    /// The fully fractional matrix with every off-diagonal entry `1/(n-1)`.
    pub fn uniform(n: usize) -> Self {
        let v = 1.0 / (n as f64 - 1.0);
        let x = SquareMatrix::from_fn(n, |i, j| if i == j { 0.0 } else { v });
        Self { x }
    }

    pub fn n(&self) -> usize {
        self.x.n()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.x.get(i, j)
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.x
    }

    pub fn into_matrix(self) -> SquareMatrix {
        self.x
    }
}

/// Which way a cut is measured across a subset boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutDirection {
    /// Sum of `x[i][j]` for `i` outside, `j` inside.
    In,
    /// Sum of `x[i][j]` for `i` inside, `j` outside.
    Out,
}

/// One violated cut: the node subset, the direction, and the cut value
/// (always `< 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub subset: Vec<usize>,
    pub direction: CutDirection,
    pub cut: f64,
}

/// All violations found by one detector pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViolationSet {
    pub entries: Vec<Violation>,
}

impl ViolationSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn subset_mask(n: usize, subset: &[usize]) -> Result<Vec<bool>, SubtourError> {
    let mut mask = vec![false; n];
    for &v in subset {
        if v >= n || mask[v] {
            return Err(SubtourError::InvalidSubsetNode { node: v, n });
        }
        mask[v] = true;
    }
    Ok(mask)
}

/// Directed cut value of `subset` against its complement.
pub fn cut_value(
    x: &SolutionMatrix,
    subset: &[usize],
    direction: CutDirection,
) -> Result<f64, SubtourError> {
    let n = x.n();
    if subset.is_empty() || subset.len() >= n {
        return Err(SubtourError::InvalidSubsetSize {
            size: subset.len(),
            n,
        });
    }
    let mask = subset_mask(n, subset)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let crossing = match direction {
                CutDirection::Out => mask[i] && !mask[j],
                CutDirection::In => !mask[i] && mask[j],
            };
            if crossing {
                total += x.get(i, j);
            }
        }
    }
    Ok(total)
}

/// Finds node subsets that violate the directed cut constraint by adding
/// undirected edges (keyed by the sum of both direction weights) in
/// decreasing order and checking each newly merged component.
///
/// Exactly `n - 2` merges are processed, so the scan stops when two
/// components remain; the whole graph is never reported. Equal edge
/// weights are ordered by `(min index, max index)` ascending, which makes
/// the result deterministic. Runs in `O(n^3)`: each merge re-scans the
/// component labels with a full double loop.
pub fn parametric_connectivity(x: &SolutionMatrix) -> Result<ViolationSet, SubtourError> {
    let n = x.n();
    if n < 3 {
        return Err(SubtourError::TooSmall { min: 3, got: n });
    }

    struct Edge {
        i: usize,
        j: usize,
        weight: f64,
    }

    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push(Edge {
                i,
                j,
                weight: x.get(i, j) + x.get(j, i),
            });
        }
    }
    edges.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .expect("weights are finite")
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });

    let mut comp: Vec<usize> = (0..n).collect();
    let mut violations = ViolationSet::empty();
    let mut merges = 0;

    for edge in &edges {
        let c = comp[edge.i];
        let c0 = comp[edge.j];
        if c == c0 {
            continue;
        }
        merges += 1;
        for label in comp.iter_mut() {
            if *label == c0 {
                *label = c;
            }
        }

        // Both directional cuts of the merged component against the rest.
        let mut cut_in = 0.0;
        let mut cut_out = 0.0;
        for v1 in 0..n {
            let inside1 = comp[v1] == c;
            for v2 in 0..n {
                let inside2 = comp[v2] == c;
                if inside1 && !inside2 {
                    cut_out += x.get(v1, v2);
                } else if !inside1 && inside2 {
                    cut_in += x.get(v1, v2);
                }
            }
        }

        for (cut, direction) in [(cut_in, CutDirection::In), (cut_out, CutDirection::Out)] {
            if cut < 1.0 {
                let subset: Vec<usize> = (0..n).filter(|&v| comp[v] == c).collect();
                violations.entries.push(Violation {
                    subset,
                    direction,
                    cut,
                });
            }
        }

        if merges == n - 2 {
            break;
        }
    }

    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::Tour;
    use crate::testutil::random_solution;

    /// Independent cut recomputation used as the test oracle.
    fn direct_cut(x: &SolutionMatrix, mask: &[bool], direction: CutDirection) -> f64 {
        let n = x.n();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let crossing = match direction {
                    CutDirection::Out => mask[i] && !mask[j],
                    CutDirection::In => !mask[i] && mask[j],
                };
                if crossing {
                    total += x.get(i, j);
                }
            }
        }
        total
    }

    #[test]
    fn solution_matrix_validation() {
        let mut m = SquareMatrix::zeros(3);
        m.set(0, 1, 1.2);
        assert!(matches!(
            SolutionMatrix::new(m),
            Err(SubtourError::EntryOutOfRange { .. })
        ));
        let mut m = SquareMatrix::zeros(3);
        m.set(1, 1, 0.5);
        assert!(matches!(
            SolutionMatrix::new(m),
            Err(SubtourError::NonZeroDiagonal { .. })
        ));
    }

    #[test]
    fn cut_of_full_tour_is_at_least_one() {
        let tour = Tour::new(vec![0, 3, 1, 4, 2]).unwrap();
        let x = SolutionMatrix::from_tour(&tour);
        for q in [vec![0], vec![0, 1], vec![2, 3, 4], vec![1, 2, 3, 4]] {
            assert!(cut_value(&x, &q, CutDirection::Out).unwrap() >= 1.0);
            assert!(cut_value(&x, &q, CutDirection::In).unwrap() >= 1.0);
        }
    }

    #[test]
    fn cut_of_disconnected_two_cycles_is_zero() {
        let mut m = SquareMatrix::zeros(4);
        m.set(0, 1, 1.0);
        m.set(1, 0, 1.0);
        m.set(2, 3, 1.0);
        m.set(3, 2, 1.0);
        let x = SolutionMatrix::new(m).unwrap();
        assert_eq!(cut_value(&x, &[0, 1], CutDirection::Out).unwrap(), 0.0);
        assert_eq!(cut_value(&x, &[0, 1], CutDirection::In).unwrap(), 0.0);
    }

    #[test]
    fn cut_of_uniform_solution_matches_closed_form() {
        let x = SolutionMatrix::uniform(4);
        // k * (n - k) / (n - 1) with k = 2, n = 4.
        let expected = 4.0 / 3.0;
        assert!((cut_value(&x, &[0, 2], CutDirection::Out).unwrap() - expected).abs() < 1e-12);
        assert!((cut_value(&x, &[0, 2], CutDirection::In).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cut_rejects_bad_subsets() {
        let x = SolutionMatrix::uniform(4);
        assert!(matches!(
            cut_value(&x, &[], CutDirection::Out),
            Err(SubtourError::InvalidSubsetSize { .. })
        ));
        assert!(matches!(
            cut_value(&x, &[0, 1, 2, 3], CutDirection::In),
            Err(SubtourError::InvalidSubsetSize { .. })
        ));
        assert!(matches!(
            cut_value(&x, &[0, 0], CutDirection::In),
            Err(SubtourError::InvalidSubsetNode { .. })
        ));
    }

    #[test]
    fn full_tour_has_no_violations() {
        for n in [3, 5, 9] {
            let order: Vec<usize> = (0..n).collect();
            let tour = Tour::new(order).unwrap();
            let x = SolutionMatrix::from_tour(&tour);
            let s = parametric_connectivity(&x).unwrap();
            assert!(s.is_empty(), "n = {n}: {s:?}");
        }
    }

    #[test]
    fn two_disjoint_cycles_are_detected() {
        let mut m = SquareMatrix::zeros(4);
        m.set(0, 1, 1.0);
        m.set(1, 0, 1.0);
        m.set(2, 3, 1.0);
        m.set(3, 2, 1.0);
        let x = SolutionMatrix::new(m).unwrap();
        let s = parametric_connectivity(&x).unwrap();
        assert!(!s.is_empty());
        let has_pair = s
            .entries
            .iter()
            .any(|v| (v.subset == [0, 1] || v.subset == [2, 3]) && v.cut == 0.0);
        assert!(has_pair, "{s:?}");
    }

    #[test]
    fn reported_violations_are_sound() {
        for seed in 0..30 {
            let x = random_solution(8, seed);
            let s = parametric_connectivity(&x).unwrap();
            for v in &s.entries {
                assert!(v.subset.len() >= 2 && v.subset.len() <= 7);
                assert!(v.cut < 1.0);
                let mut mask = vec![false; 8];
                for &node in &v.subset {
                    mask[node] = true;
                }
                let recomputed = direct_cut(&x, &mask, v.direction);
                assert!((recomputed - v.cut).abs() < 1e-12);
            }
            assert!(s.len() <= 2 * (8 - 2));
        }
    }

    #[test]
    fn multi_subtour_solutions_expose_a_subtour() {
        // Three disjoint directed cycles on 9 nodes.
        let cycles: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]];
        let mut m = SquareMatrix::zeros(9);
        for cycle in &cycles {
            for k in 0..cycle.len() {
                m.set(cycle[k], cycle[(k + 1) % cycle.len()], 1.0);
            }
        }
        let x = SolutionMatrix::new(m).unwrap();
        let s = parametric_connectivity(&x).unwrap();
        for cycle in &cycles {
            let mut sorted = cycle.clone();
            sorted.sort_unstable();
            assert!(
                s.entries.iter().any(|v| v.subset == sorted),
                "cycle {sorted:?} not reported: {s:?}"
            );
        }
    }

    #[test]
    fn detector_needs_three_nodes() {
        let x = SolutionMatrix::uniform(2);
        assert!(matches!(
            parametric_connectivity(&x),
            Err(SubtourError::TooSmall { .. })
        ));
    }

    #[test]
    fn violations_against_exhaustive_enumeration() {
        // Every reported subset must be confirmed violating by a scan over
        // all 2^n subsets; this is the soundness oracle at small n.
        for seed in 0..10 {
            let x = random_solution(6, 1000 + seed);
            let s = parametric_connectivity(&x).unwrap();
            for v in &s.entries {
                let mut bits = 0usize;
                for &node in &v.subset {
                    bits |= 1 << node;
                }
                let mut found = false;
                for subset in 1..(1usize << 6) - 1 {
                    if subset == bits {
                        let mask: Vec<bool> = (0..6).map(|b| subset >> b & 1 == 1).collect();
                        let cut = direct_cut(&x, &mask, v.direction);
                        assert!(cut < 1.0, "reported cut not violating: {v:?}");
                        found = true;
                    }
                }
                assert!(found);
            }
        }
    }
}
