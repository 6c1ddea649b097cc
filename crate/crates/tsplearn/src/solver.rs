//! Tour readout, per-instance direct loss minimization, the training
//! loop, and evaluation.
//!
//! Every run is a pure function of its configuration and seed. Sub-seeds
//! for data generation, Gumbel noise, model initialization, and decode
//! starts are derived from the run seed under distinct domain tags, so the
//! streams never collide and reruns reproduce byte-identical artifacts.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{AdamConfig, AdamState, DiffError, Graph};
use crate::gnn::{solution_from_graph, GnnConfig, GnnError, GnnModel};
use crate::instances::{
    derive_seed, generate_asymmetric, generate_euclidean, held_karp, optimality_gap, read_dataset,
    tour_length, InstanceError, Tour, TspInstance, HELD_KARP_MAX_N,
};
use crate::loss::{
    gumbel_softmax_edges, sample_gumbel_noise, tsp_loss_grad, tsp_loss_graph, EdgeLogits,
    LossError, LossWeights,
};
use crate::subtour::{parametric_connectivity, SolutionMatrix, SubtourError};

const SEED_DOMAIN_MODEL: u64 = 1;
const SEED_DOMAIN_TRAIN_DATA: u64 = 2;
const SEED_DOMAIN_NOISE: u64 = 3;
const SEED_DOMAIN_DECODE: u64 = 4;

fn seed_for(base: u64, domain: u64, index: u64) -> u64 {
    derive_seed(derive_seed(base, domain), index)
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("start node {start} out of range for n = {n}")]
    StartOutOfRange { start: usize, n: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("epoch {epoch}: training instance {index} collides with the validation set")]
    SplitViolation { epoch: usize, index: usize },
    #[error("instance {index}: no known optimum and n = {n} exceeds the oracle limit")]
    MissingOptimum { index: usize, n: usize },
    #[error("non-finite value during optimization at step {step}")]
    NonFiniteStep { step: usize },
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Subtour(#[from] SubtourError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Follows the heaviest available edge from the current node until the
/// cycle closes; ties break toward the lowest node index.
pub fn greedy_decode(x: &SolutionMatrix, start: usize) -> Result<Tour, SolverError> {
    let n = x.n();
    if start >= n {
        return Err(SolverError::StartOutOfRange { start, n });
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut current = start;
    visited[current] = true;
    order.push(current);
    for _ in 1..n {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !visited[j] && best.map_or(true, |(_, bw)| x.get(current, j) > bw) {
                best = Some((j, x.get(current, j)));
            }
        }
        let (next, _) = best.expect("unvisited node exists");
        visited[next] = true;
        order.push(next);
        current = next;
    }
    Ok(Tour::new(order)?)
}

/// Optimizes free edge logits on a single instance by Adam on the relaxed
/// loss, re-detecting violated cuts every step. Returns the final
/// noiseless solution; `steps = 0` yields the uniform relaxation.
pub fn direct_minimize(
    inst: &TspInstance,
    steps: usize,
    lr: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<SolutionMatrix, SolverError> {
    let n = inst.n();
    let weights = LossWeights::new(5.0, 1.0, 1.0, noise_scale)?;
    let mut logits = EdgeLogits::zeros(n);
    let mut adam = AdamState::new(AdamConfig::new(lr), &[n * n, n * n]);

    let mut grad0 = vec![0.0; n * n];
    let mut grad1 = vec![0.0; n * n];
    for step in 0..steps {
        let x = gumbel_softmax_edges(&logits, noise_scale, derive_seed(seed, step as u64));
        let violations = parametric_connectivity(&x)?;
        let dloss_dx = tsp_loss_grad(&x, inst, &violations, &weights)?;

        // Chain through the per-edge two-class softmax: for class-1
        // probability p, dL/dz1 = dL/dp * p(1-p) and dL/dz0 = -dL/dz1.
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                if i == j {
                    grad0[idx] = 0.0;
                    grad1[idx] = 0.0;
                    continue;
                }
                let p = x.get(i, j);
                let g = dloss_dx.get(i, j) * p * (1.0 - p);
                if !g.is_finite() {
                    return Err(SolverError::NonFiniteStep { step });
                }
                grad1[idx] = g;
                grad0[idx] = -g;
            }
        }

        let (class0, class1) = logits.classes_mut();
        adam.step_slices(
            &mut [class0.as_mut_slice(), class1.as_mut_slice()],
            &[&grad0, &grad1],
        )?;
    }

    Ok(gumbel_softmax_edges(&logits, 0.0, 0))
}

/// Which generator feeds training and what the encoder expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceKind {
    Euclidean,
    Asymmetric,
}

impl InstanceKind {
    pub fn generate(
        &self,
        n: usize,
        count: usize,
        seed: u64,
    ) -> Result<Vec<TspInstance>, InstanceError> {
        match self {
            InstanceKind::Euclidean => generate_euclidean(n, count, seed),
            InstanceKind::Asymmetric => generate_asymmetric(n, count, seed),
        }
    }
}

/// Everything one training run needs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub epoch_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n: usize,
    pub kind: InstanceKind,
    pub d: usize,
    pub layers: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub validation_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub best_checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("epochs", self.epochs),
            ("epoch_size", self.epoch_size),
            ("batch_size", self.batch_size),
            ("d", self.d),
            ("layers", self.layers),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(SolverError::Config(format!("{name} must be positive")));
            }
        }
        if self.n < 3 {
            return Err(SolverError::Config("n must be at least 3".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SolverError::Config("learning_rate must be positive".into()));
        }
        if self.epoch_size % self.batch_size != 0 {
            return Err(SolverError::Config(format!(
                "epoch_size {} must be divisible by batch_size {}",
                self.epoch_size, self.batch_size
            )));
        }
        Ok(())
    }

    pub fn gnn_config(&self) -> GnnConfig {
        let mut config = match self.kind {
            InstanceKind::Euclidean => GnnConfig::euclidean(self.d, self.layers),
            InstanceKind::Asymmetric => GnnConfig::asymmetric(self.d, self.layers),
        };
        config.noise_scale = self.loss_weights.noise_scale;
        config
    }
}

/// One row of the training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_mean_gap: f64,
    /// Wall-clock epoch duration. Reported on stdout, never written to the
    /// metrics file, which must be byte-identical across reruns.
    pub seconds: f64,
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: GnnModel,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Writes the metrics file: a header plus one `epoch,mean_train_loss,
/// val_mean_gap` row per epoch.
pub fn write_metrics(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<(), SolverError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,mean_train_loss,val_mean_gap")?;
    for row in metrics {
        writeln!(
            out,
            "{},{:.9},{:.3}",
            row.epoch, row.mean_train_loss, row.val_mean_gap
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Trains a fresh model: every epoch generates `epoch_size` new instances
/// (never the validation ones — enforced by hash), runs noisy forward
/// passes batch by batch, averages gradients in index order, and applies
/// one Adam step per batch. Validation runs after each epoch with greedy
/// decoding and noise off. Writes the metrics file plus final and best
/// checkpoints; prints one progress line per epoch.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, SolverError> {
    config.validate()?;
    let validation = read_dataset(&config.validation_path)?;
    if validation.is_empty() {
        return Err(SolverError::Config("validation set is empty".into()));
    }
    let val_hashes: HashSet<u64> = validation.iter().map(TspInstance::content_hash).collect();

    let mut model = GnnModel::init(config.gnn_config(), seed_for(config.seed, SEED_DOMAIN_MODEL, 0));
    let param_lens: Vec<usize> = model.named_parameters().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::new(AdamConfig::new(config.learning_rate), &param_lens);

    let noise_scale = config.loss_weights.noise_scale;
    let decode_seed = seed_for(config.seed, SEED_DOMAIN_DECODE, 0);

    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, GnnModel)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let data = config.kind.generate(
            config.n,
            config.epoch_size,
            seed_for(config.seed, SEED_DOMAIN_TRAIN_DATA, epoch as u64),
        )?;
        for (index, inst) in data.iter().enumerate() {
            if val_hashes.contains(&inst.content_hash()) {
                return Err(SolverError::SplitViolation { epoch, index });
            }
        }

        let mut loss_total = 0.0;
        let mut grad_acc: Vec<Vec<f64>> = param_lens.iter().map(|&l| vec![0.0; l]).collect();
        for (batch_idx, batch) in data.chunks(config.batch_size).enumerate() {
            for acc in &mut grad_acc {
                acc.iter_mut().for_each(|v| *v = 0.0);
            }
            let mut batch_loss = 0.0;
            for (offset, inst) in batch.iter().enumerate() {
                let sample_index =
                    (epoch as u64) * config.epoch_size as u64 + (batch_idx * config.batch_size + offset) as u64;
                let noise = if noise_scale > 0.0 {
                    Some(sample_gumbel_noise(
                        config.n,
                        seed_for(config.seed, SEED_DOMAIN_NOISE, sample_index),
                    ))
                } else {
                    None
                };

                let mut graph = Graph::new();
                let pass = model.forward_graph(&mut graph, inst, noise.as_ref())?;
                let x = solution_from_graph(&graph, pass.x);
                let violations = parametric_connectivity(&x)?;
                let loss_var =
                    tsp_loss_graph(&mut graph, pass.x, inst, &violations, &config.loss_weights)?;
                batch_loss += graph.value(loss_var).item();
                let mut grads = graph.backward(loss_var)?;
                for (slot, (_, var)) in grad_acc.iter_mut().zip(&pass.params) {
                    if let Some(g) = grads.take(*var) {
                        for (acc, gv) in slot.iter_mut().zip(g.data()) {
                            *acc += gv;
                        }
                    }
                }
            }

            let inv = 1.0 / batch.len() as f64;
            for acc in &mut grad_acc {
                acc.iter_mut().for_each(|v| *v *= inv);
            }
            loss_total += batch_loss;

            let mut params = model.parameters_mut();
            let mut param_slices: Vec<&mut [f64]> =
                params.iter_mut().map(|t| t.data_mut()).collect();
            let grad_slices: Vec<&[f64]> = grad_acc.iter().map(|g| g.as_slice()).collect();
            adam.step_slices(&mut param_slices, &grad_slices)?;
        }

        let report = evaluate(&model, &validation, decode_seed)?;
        let row = EpochMetrics {
            epoch,
            mean_train_loss: loss_total / config.epoch_size as f64,
            val_mean_gap: report.mean_gap_percent,
            seconds: started.elapsed().as_secs_f64(),
        };
        println!(
            "epoch {}/{}: train loss {:.6}, validation gap {:.3}% ({:.1}s)",
            row.epoch, config.epochs, row.mean_train_loss, row.val_mean_gap, row.seconds
        );
        if best.as_ref().map_or(true, |(g, _, _)| row.val_mean_gap < *g) {
            best = Some((row.val_mean_gap, epoch, model.clone()));
        }
        metrics.push(row);
    }

    write_metrics(&config.metrics_path, &metrics)?;
    model.save(&config.checkpoint_path)?;
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    best_model.save(&config.best_checkpoint_path)?;

    Ok(TrainOutcome {
        model,
        metrics,
        best_epoch,
    })
}

/// Per-instance evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub index: usize,
    pub predicted_len: f64,
    pub opt_len: f64,
    pub gap_percent: f64,
}

/// Evaluation over a dataset: per-instance predicted lengths and gaps,
/// their arithmetic mean, and the wall time of the whole pass.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_instance: Vec<InstanceResult>,
    pub mean_gap_percent: f64,
    /// Wall-clock duration of the evaluation. Reported on stdout, never
    /// written to report files (they must be byte-identical across reruns).
    pub total_seconds: f64,
}

impl EvalReport {
    pub fn from_results(per_instance: Vec<InstanceResult>, total_seconds: f64) -> Self {
        let mean = if per_instance.is_empty() {
            0.0
        } else {
            per_instance.iter().map(|r| r.gap_percent).sum::<f64>() / per_instance.len() as f64
        };
        Self {
            per_instance,
            mean_gap_percent: mean,
            total_seconds,
        }
    }

    /// Writes the report: aggregate lines, then one CSV row per instance.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), SolverError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "instances {}", self.per_instance.len())?;
        writeln!(out, "mean_gap_percent {:.3}", self.mean_gap_percent)?;
        writeln!(out, "index,predicted_len,opt_len,gap_percent")?;
        for row in &self.per_instance {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.6}",
                row.index, row.predicted_len, row.opt_len, row.gap_percent
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// The known optimum of an instance, or the Held-Karp optimum when the
/// instance is small enough to solve on the fly.
pub fn instance_optimum(inst: &TspInstance, index: usize) -> Result<f64, SolverError> {
    if let Some(opt) = inst.opt_len() {
        return Ok(opt);
    }
    if inst.n() <= HELD_KARP_MAX_N {
        let (_, cost) = held_karp(inst)?;
        return Ok(cost);
    }
    Err(SolverError::MissingOptimum {
        index,
        n: inst.n(),
    })
}

/// Runs the model with noise off on every instance, decodes greedily from
/// a seeded random start node, and reports optimality gaps. Deterministic
/// given `(model, dataset, decode_start_seed)`.
pub fn evaluate(
    model: &GnnModel,
    dataset: &[TspInstance],
    decode_start_seed: u64,
) -> Result<EvalReport, SolverError> {
    let started = Instant::now();
    let mut results = Vec::with_capacity(dataset.len());
    for (index, inst) in dataset.iter().enumerate() {
        let x = crate::gnn::forward(inst, model, 0.0, 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(decode_start_seed);
        rng.set_stream(index as u64);
        let start = rng.gen_range(0..inst.n());
        let tour = greedy_decode(&x, start)?;
        let predicted_len = tour_length(&tour, inst)?;
        let opt_len = instance_optimum(inst, index)?;
        let gap_percent = optimality_gap(predicted_len, opt_len)?;
        results.push(InstanceResult {
            index,
            predicted_len,
            opt_len,
            gap_percent,
        });
    }
    Ok(EvalReport::from_results(
        results,
        started.elapsed().as_secs_f64(),
    ))
}
