//! The unsupervised objective on relaxed solutions.
//!
//! For a solution matrix `X` and cost matrix `C` the loss is
//!
//! ```text
//! L = alpha * sum_{i != j} c_ij x_ij
//!   + beta  * [ sum_j (1 - colsum_j)^2 + sum_i (1 - rowsum_i)^2 ]
//!   + gamma * sum_{(Q, dir) in S} (1 - cut(Q, dir))^2
//! ```
//!
//! where `S` is a set of violated cuts found beforehand (see
//! [`crate::subtour::parametric_connectivity`]). The loss is zero-penalty
//! exactly on tour matrices, where it reduces to `alpha` times the tour
//! length. The gradient treats `S` as a constant: subset selection is a
//! discrete choice and gets no gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::instances::TspInstance;
use crate::matrix::SquareMatrix;
use crate::subtour::{CutDirection, SolutionMatrix, ViolationSet};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("solution is {got} x {got} but instance has n = {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("loss weights must be positive (alpha = {alpha}, beta = {beta}, gamma = {gamma})")]
    NonPositiveWeights { alpha: f64, beta: f64, gamma: f64 },
    #[error("noise scale must be finite and non-negative, got {0}")]
    BadNoiseScale(f64),
    #[error("logit ({i},{j}) is not finite")]
    NonFiniteLogit { i: usize, j: usize },
    #[error(transparent)]
    Subtour(#[from] crate::subtour::SubtourError),
}

/// Scaling factors of the three loss terms plus the Gumbel noise magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub noise_scale: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, noise_scale: f64) -> Result<Self, LossError> {
        if !(alpha > 0.0 && beta > 0.0 && gamma > 0.0) {
            return Err(LossError::NonPositiveWeights { alpha, beta, gamma });
        }
        if !noise_scale.is_finite() || noise_scale < 0.0 {
            return Err(LossError::BadNoiseScale(noise_scale));
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            noise_scale,
        })
    }

    /// Defaults for Euclidean instances: alpha 5, beta 1, gamma 1, no noise.
    pub fn euclidean() -> Self {
        Self {
            alpha: 5.0,
            beta: 1.0,
            gamma: 1.0,
            noise_scale: 0.0,
        }
    }

    /// Defaults for asymmetric instances: same scaling, noise magnitude 0.1.
    pub fn asymmetric() -> Self {
        Self {
            noise_scale: 0.1,
            ..Self::euclidean()
        }
    }

    pub fn with_noise(self, noise_scale: f64) -> Self {
        Self {
            noise_scale,
            ..self
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::euclidean()
    }
}

/// Per-edge class logits: `class1` favors membership in the tour,
/// `class0` favors exclusion. Diagonal entries are masked; the softmax
/// output for them is forced to 0 regardless of the stored values.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLogits {
    class0: SquareMatrix,
    class1: SquareMatrix,
}

impl EdgeLogits {
    pub fn new(class0: SquareMatrix, class1: SquareMatrix) -> Result<Self, LossError> {
        assert_eq!(class0.n(), class1.n(), "logit matrices must match in size");
        let n = class0.n();
        for m in [&class0, &class1] {
            for i in 0..n {
                for j in 0..n {
                    if i != j && !m.get(i, j).is_finite() {
                        return Err(LossError::NonFiniteLogit { i, j });
                    }
                }
            }
        }
        Ok(Self { class0, class1 })
    }

    /// All-zero logits: every off-diagonal edge probability is 1/2.
    pub fn zeros(n: usize) -> Self {
        Self {
            class0: SquareMatrix::zeros(n),
            class1: SquareMatrix::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.class0.n()
    }

    pub fn class0(&self) -> &SquareMatrix {
        &self.class0
    }

    pub fn class1(&self) -> &SquareMatrix {
        &self.class1
    }

    pub fn class0_mut(&mut self) -> &mut SquareMatrix {
        &mut self.class0
    }

    pub fn class1_mut(&mut self) -> &mut SquareMatrix {
        &mut self.class1
    }

    /// Both class matrices, mutably (for in-place optimization).
    pub fn classes_mut(&mut self) -> (&mut SquareMatrix, &mut SquareMatrix) {
        (&mut self.class0, &mut self.class1)
    }
}

fn check_shape(x: &SolutionMatrix, inst: &TspInstance) -> Result<(), LossError> {
    if x.n() != inst.n() {
        return Err(LossError::ShapeMismatch {
            got: x.n(),
            expected: inst.n(),
        });
    }
    Ok(())
}

/// Evaluates the loss with the violation set's subsets held fixed. Each
/// entry's cut is recomputed from the current `x` (the stored cut value is
/// only the detector's report); the subset choice itself carries no
/// gradient.
pub fn tsp_loss(
    x: &SolutionMatrix,
    inst: &TspInstance,
    s: &ViolationSet,
    w: &LossWeights,
) -> Result<f64, LossError> {
    check_shape(x, inst)?;
    let n = x.n();

    let mut cost_term = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cost_term += inst.weight(i, j) * x.get(i, j);
            }
        }
    }

    let mut degree_term = 0.0;
    for j in 0..n {
        let mut colsum = 0.0;
        for i in 0..n {
            if i != j {
                colsum += x.get(i, j);
            }
        }
        degree_term += (1.0 - colsum) * (1.0 - colsum);
    }
    for i in 0..n {
        let mut rowsum = 0.0;
        for j in 0..n {
            if i != j {
                rowsum += x.get(i, j);
            }
        }
        degree_term += (1.0 - rowsum) * (1.0 - rowsum);
    }

    let mut subtour_term = 0.0;
    for v in &s.entries {
        let cut = crate::subtour::cut_value(x, &v.subset, v.direction)?;
        let deficit = 1.0 - cut;
        subtour_term += deficit * deficit;
    }

    Ok(w.alpha * cost_term + w.beta * degree_term + w.gamma * subtour_term)
}

/// Analytic gradient of [`tsp_loss`] with respect to `x`. The subset
/// choice is a constant; each subset's cut is a linear function of `x`.
/// The diagonal gradient is zero.
pub fn tsp_loss_grad(
    x: &SolutionMatrix,
    inst: &TspInstance,
    s: &ViolationSet,
    w: &LossWeights,
) -> Result<SquareMatrix, LossError> {
    check_shape(x, inst)?;
    let n = x.n();

    let mut colsum = vec![0.0; n];
    let mut rowsum = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = x.get(i, j);
                rowsum[i] += v;
                colsum[j] += v;
            }
        }
    }

    let mut grad = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let g = w.alpha * inst.weight(i, j)
                    - 2.0 * w.beta * (1.0 - colsum[j])
                    - 2.0 * w.beta * (1.0 - rowsum[i]);
                grad.set(i, j, g);
            }
        }
    }

    for v in &s.entries {
        let mut mask = vec![false; n];
        for &node in &v.subset {
            mask[node] = true;
        }
        let cut = crate::subtour::cut_value(x, &v.subset, v.direction)?;
        let coeff = -2.0 * w.gamma * (1.0 - cut);
        for i in 0..n {
            for j in 0..n {
                let crossing = match v.direction {
                    CutDirection::Out => mask[i] && !mask[j],
                    CutDirection::In => !mask[i] && mask[j],
                };
                if crossing {
                    grad.set(i, j, grad.get(i, j) + coeff);
                }
            }
        }
    }

    Ok(grad)
}

/// Numerically stable logistic function.
#[inline]
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// One standard Gumbel draw: `-ln(-ln u)` with `u` uniform in `(0, 1)`.
#[inline]
fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.sample(rand::distributions::Open01);
    -(-u.ln()).ln()
}

/// Draws the per-edge Gumbel noise pair `(g0, g1)` for every off-diagonal
/// edge in row-major order. Shared by the plain and the graph-recorded
/// forward passes so both see identical noise for the same seed.
pub fn sample_gumbel_noise(n: usize, seed: u64) -> (SquareMatrix, SquareMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g0 = SquareMatrix::zeros(n);
    let mut g1 = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                g0.set(i, j, gumbel(&mut rng));
                g1.set(i, j, gumbel(&mut rng));
            }
        }
    }
    (g0, g1)
}

/// Converts logits to a solution matrix: per off-diagonal edge, add scaled
/// Gumbel noise to both class logits and take the class-1 softmax
/// probability (temperature 1). `noise_scale = 0` is deterministic and
/// draws nothing. The diagonal is forced to 0.
pub fn gumbel_softmax_edges(logits: &EdgeLogits, noise_scale: f64, seed: u64) -> SolutionMatrix {
    let n = logits.n();
    let noise = if noise_scale > 0.0 {
        Some(sample_gumbel_noise(n, seed))
    } else {
        None
    };
    let mut x = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (mut z0, mut z1) = (logits.class0.get(i, j), logits.class1.get(i, j));
            if let Some((g0, g1)) = &noise {
                z0 += noise_scale * g0.get(i, j);
                z1 += noise_scale * g1.get(i, j);
            }
            x.set(i, j, sigmoid(z1 - z0));
        }
    }
    SolutionMatrix::new(x).expect("sigmoid output is in [0,1] with zero diagonal")
}

/// Records the loss on a graph with `x` as the `[n, n]` solution variable.
/// Mirrors [`tsp_loss`]: the violation set enters as constant crossing
/// masks, so the subset choice receives no gradient.
pub fn tsp_loss_graph(
    graph: &mut Graph,
    x: Var,
    inst: &TspInstance,
    s: &ViolationSet,
    w: &LossWeights,
) -> Result<Var, DiffError> {
    let n = inst.n();

    let costs: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            if i == j {
                0.0
            } else {
                inst.weight(i, j)
            }
        })
        .collect();
    let cost_const = graph.constant(Tensor::new(vec![n, n], costs)?)?;
    let weighted = graph.mul(x, cost_const)?;
    let cost_sum = graph.sum_all(weighted)?;
    let cost_term = graph.scale(cost_sum, w.alpha)?;

    let degree_penalty = |axis: usize, graph: &mut Graph| -> Result<Var, DiffError> {
        let sums = graph.sum_axis(x, axis)?;
        let negated = graph.scale(sums, -1.0)?;
        let deficit = graph.add_scalar(negated, 1.0)?;
        let squared = graph.mul(deficit, deficit)?;
        graph.sum_all(squared)
    };
    let col_penalty = degree_penalty(0, graph)?;
    let row_penalty = degree_penalty(1, graph)?;
    let degree_sum = graph.add(col_penalty, row_penalty)?;
    let degree_term = graph.scale(degree_sum, w.beta)?;

    let mut total = graph.add(cost_term, degree_term)?;

    let mut subtour_sum: Option<Var> = None;
    for violation in &s.entries {
        let mut mask = vec![false; n];
        for &node in &violation.subset {
            mask[node] = true;
        }
        let crossing: Vec<f64> = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                let crosses = match violation.direction {
                    CutDirection::Out => mask[i] && !mask[j],
                    CutDirection::In => !mask[i] && mask[j],
                };
                if crosses {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mask_const = graph.constant(Tensor::new(vec![n, n], crossing)?)?;
        let cut_edges = graph.mul(x, mask_const)?;
        let cut = graph.sum_all(cut_edges)?;
        let negated = graph.scale(cut, -1.0)?;
        let deficit = graph.add_scalar(negated, 1.0)?;
        let squared = graph.mul(deficit, deficit)?;
        subtour_sum = Some(match subtour_sum {
            Some(acc) => graph.add(acc, squared)?,
            None => squared,
        });
    }
    if let Some(subtour) = subtour_sum {
        let subtour_term = graph.scale(subtour, w.gamma)?;
        total = graph.add(total, subtour_term)?;
    }
    Ok(total)
}

/// Replaces each class matrix by the mean of the two edge directions:
/// `M <- (M + M^T) / 2`. Idempotent.
pub fn symmetrize_logits(logits: &EdgeLogits) -> EdgeLogits {
    let sym = |m: &SquareMatrix| SquareMatrix::from_fn(m.n(), |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    EdgeLogits {
        class0: sym(&logits.class0),
        class1: sym(&logits.class1),
    }
}
