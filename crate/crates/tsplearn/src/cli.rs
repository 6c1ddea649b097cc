//! Command implementations behind the `tsplearn` binary.
//!
//! Every command is a pure function of its flags, config file, and input
//! files: rerunning with the same seed overwrites every output file with
//! identical bytes. Wall-clock timings go to stdout only, so they never
//! break that guarantee.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::gnn::{GnnError, GnnModel};
use crate::instances::{
    brute_force, derive_seed, greedy_nearest, held_karp, optimality_gap, random_tour,
    read_dataset, tour_length, write_dataset, InstanceError, BRUTE_FORCE_MAX_N,
    HELD_KARP_MAX_N,
};
use crate::loss::{LossError, LossWeights};
use crate::solver::{
    direct_minimize, evaluate, greedy_decode, instance_optimum, train, EvalReport,
    InstanceKind, InstanceResult, SolverError, TrainConfig,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Instance(InstanceError::TooSmall { .. })
            | CliError::Instance(InstanceError::EmptyCount)
            | CliError::Instance(InstanceError::OracleLimit { .. }) => 2,
            CliError::Solver(SolverError::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Euclidean,
    Asymmetric,
}

impl From<KindArg> for InstanceKind {
    fn from(kind: KindArg) -> Self {
        match kind {
            KindArg::Euclidean => InstanceKind::Euclidean,
            KindArg::Asymmetric => InstanceKind::Asymmetric,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OracleMethod {
    /// Held-Karp dynamic programming (n up to 22).
    HeldKarp,
    /// Exhaustive permutation search (n up to 10).
    Brute,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineMethod {
    /// Nearest-neighbor construction on the weight matrix.
    Greedy,
    /// Uniformly random tours.
    Random,
}

#[derive(Debug, Parser)]
#[command(
    name = "tsplearn",
    about = "Unsupervised TSP: datasets, exact oracles, baselines, loss minimization, training, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset of random instances (one JSON record per line).
    Gen {
        /// Instance family to draw from.
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Number of nodes per instance (at least 3).
        #[arg(long)]
        n: usize,
        /// Number of instances.
        #[arg(long)]
        count: usize,
        /// Generator seed; identical seeds give identical files.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate every record of a dataset with its exact optimum.
    Oracle {
        /// Input dataset path.
        #[arg(long = "in")]
        input: PathBuf,
        /// Exact solver to use.
        #[arg(long, value_enum)]
        method: OracleMethod,
        /// Output dataset path (may equal the input).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a classical baseline against the known optima of a dataset.
    Baseline {
        /// Baseline to run.
        #[arg(long, value_enum)]
        method: BaselineMethod,
        /// Input dataset path (annotated, or small enough to solve on the fly).
        #[arg(long = "in")]
        input: PathBuf,
        /// Seed for tour sampling and start-node choice.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Minimize the relaxed loss directly on every instance and decode.
    Minimize {
        /// Input dataset path.
        #[arg(long = "in")]
        input: PathBuf,
        /// Adam steps per instance.
        #[arg(long, default_value_t = 15_000)]
        steps: usize,
        /// Adam learning rate.
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Gumbel noise magnitude during optimization.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Seed for noise and decode starts.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model as described by a flat key-value config file.
    Train {
        /// Config file path (see `ExperimentConfig` in the docs).
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a model checkpoint on a dataset.
    Eval {
        /// Checkpoint path written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Input dataset path.
        #[arg(long = "in")]
        input: PathBuf,
        /// Seed for the per-instance decode start node.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report output path.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flat key-value training configuration (TOML syntax, no tables).
/// Unknown keys are rejected. Paths are validated before any work runs.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: String,
    pub n: usize,
    pub epochs: usize,
    pub epoch_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub d: usize,
    pub layers: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_one")]
    pub beta: f64,
    #[serde(default = "default_one")]
    pub gamma: f64,
    /// Gumbel noise magnitude; defaults to 0 (euclidean) or 0.1 (asymmetric).
    pub noise: Option<f64>,
    pub seed: u64,
    pub validation: PathBuf,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn default_alpha() -> f64 {
    5.0
}

fn default_one() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Input {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn into_train_config(self) -> Result<TrainConfig, CliError> {
        let kind = match self.kind.as_str() {
            "euclidean" => InstanceKind::Euclidean,
            "asymmetric" => InstanceKind::Asymmetric,
            other => {
                return Err(CliError::Config(format!(
                    "kind must be `euclidean` or `asymmetric`, got `{other}`"
                )))
            }
        };
        let noise = self.noise.unwrap_or(match kind {
            InstanceKind::Euclidean => 0.0,
            InstanceKind::Asymmetric => 0.1,
        });
        let loss_weights = LossWeights::new(self.alpha, self.beta, self.gamma, noise)?;

        if !self.validation.exists() {
            return Err(CliError::Config(format!(
                "validation set {} does not exist",
                self.validation.display()
            )));
        }
        for out in [&self.checkpoint, &self.best_checkpoint, &self.metrics] {
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() && !parent.exists() {
                    return Err(CliError::Config(format!(
                        "output directory {} does not exist",
                        parent.display()
                    )));
                }
            }
        }

        let config = TrainConfig {
            epochs: self.epochs,
            epoch_size: self.epoch_size,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            n: self.n,
            kind,
            d: self.d,
            layers: self.layers,
            loss_weights,
            seed: self.seed,
            validation_path: self.validation,
            checkpoint_path: self.checkpoint,
            best_checkpoint_path: self.best_checkpoint,
            metrics_path: self.metrics,
        };
        config.validate()?;
        Ok(config)
    }
}

fn decode_start(seed: u64, index: u64, n: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.gen_range(0..n)
}

fn run_gen(
    kind: KindArg,
    n: usize,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let started = Instant::now();
    let instances = InstanceKind::from(kind).generate(n, count, seed)?;
    write_dataset(out, &instances)?;
    println!(
        "wrote {} instances (n = {}) to {} in {:.3}s",
        count,
        n,
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn run_oracle(input: &Path, method: OracleMethod, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let instances = read_dataset(input)?;
    let mut annotated = Vec::with_capacity(instances.len());
    for inst in instances {
        let (tour, cost) = match method {
            OracleMethod::HeldKarp => held_karp(&inst)?,
            OracleMethod::Brute => brute_force(&inst)?,
        };
        annotated.push(inst.with_optimum(cost, Some(tour))?);
    }
    write_dataset(out, &annotated)?;
    println!(
        "annotated {} instances to {} in {:.3}s",
        annotated.len(),
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Limits shared with the oracle guard so refusal messages can name them.
pub fn oracle_limit(method_is_brute: bool) -> usize {
    if method_is_brute {
        BRUTE_FORCE_MAX_N
    } else {
        HELD_KARP_MAX_N
    }
}

fn run_baseline(
    method: BaselineMethod,
    input: &Path,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let started = Instant::now();
    let instances = read_dataset(input)?;
    let mut results = Vec::with_capacity(instances.len());
    for (index, inst) in instances.iter().enumerate() {
        let tour = match method {
            BaselineMethod::Greedy => {
                greedy_nearest(inst, decode_start(seed, index as u64, inst.n()))?
            }
            BaselineMethod::Random => random_tour(inst.n(), derive_seed(seed, index as u64))?,
        };
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
    let report = EvalReport::from_results(results, started.elapsed().as_secs_f64());
    report.write_to(out)?;
    println!(
        "baseline mean gap {:.3}% over {} instances ({:.3}s), report in {}",
        report.mean_gap_percent,
        report.per_instance.len(),
        report.total_seconds,
        out.display()
    );
    Ok(())
}

fn run_minimize(
    input: &Path,
    steps: usize,
    lr: f64,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let started = Instant::now();
    let instances = read_dataset(input)?;
    let mut results = Vec::with_capacity(instances.len());
    for (index, inst) in instances.iter().enumerate() {
        let x = direct_minimize(inst, steps, lr, noise, derive_seed(seed, index as u64))?;
        let tour = greedy_decode(&x, decode_start(seed, index as u64, inst.n()))?;
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
    let report = EvalReport::from_results(results, started.elapsed().as_secs_f64());
    report.write_to(out)?;
    println!(
        "direct minimization mean gap {:.3}% over {} instances ({:.3}s), report in {}",
        report.mean_gap_percent,
        report.per_instance.len(),
        report.total_seconds,
        out.display()
    );
    Ok(())
}

fn run_train(config_path: &Path) -> Result<(), CliError> {
    let config = ExperimentConfig::from_file(config_path)?.into_train_config()?;
    let outcome = train(&config)?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "training done: {} epochs, final validation gap {:.3}%, best epoch {} ({} parameters)",
        outcome.metrics.len(),
        last.val_mean_gap,
        outcome.best_epoch,
        outcome.model.parameter_count()
    );
    Ok(())
}

fn run_eval(model_path: &Path, input: &Path, seed: u64, out: &Path) -> Result<(), CliError> {
    let model = GnnModel::load(model_path)?;
    let instances = read_dataset(input)?;
    let report = evaluate(&model, &instances, seed)?;
    report.write_to(out)?;
    println!(
        "model mean gap {:.3}% over {} instances ({:.3}s), report in {}",
        report.mean_gap_percent,
        report.per_instance.len(),
        report.total_seconds,
        out.display()
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            kind,
            n,
            count,
            seed,
            out,
        } => run_gen(kind, n, count, seed, &out),
        Command::Oracle { input, method, out } => run_oracle(&input, method, &out),
        Command::Baseline {
            method,
            input,
            seed,
            out,
        } => run_baseline(method, &input, seed, &out),
        Command::Minimize {
            input,
            steps,
            lr,
            noise,
            seed,
            out,
        } => run_minimize(&input, steps, lr, noise, seed, &out),
        Command::Train { config } => run_train(&config),
        Command::Eval {
            model,
            input,
            seed,
            out,
        } => run_eval(&model, &input, seed, &out),
    }
}

/// Entry point used by the binary: parse, run, report, return exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(error) => {
            eprintln!("error: {error}");
            error.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_config_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let val = dir.path().join("val.ndj");
        crate::instances::write_dataset(
            &val,
            &crate::instances::generate_euclidean(6, 2, 1).unwrap(),
        )
        .unwrap();
        let config_path = dir.path().join("train.toml");
        std::fs::write(
            &config_path,
            format!(
                "kind = \"euclidean\"\nn = 6\nepochs = 2\nepoch_size = 32\nbatch_size = 16\n\
                 learning_rate = 1e-3\nd = 8\nlayers = 1\nseed = 7\n\
                 validation = \"{}\"\ncheckpoint = \"{}\"\nbest_checkpoint = \"{}\"\nmetrics = \"{}\"\n",
                val.display(),
                dir.path().join("final.ckpt").display(),
                dir.path().join("best.ckpt").display(),
                dir.path().join("metrics.csv").display(),
            ),
        )
        .unwrap();
        let config = ExperimentConfig::from_file(&config_path)
            .unwrap()
            .into_train_config()
            .unwrap();
        assert_eq!(config.epochs, 2);
        assert_eq!(config.loss_weights.alpha, 5.0);
        assert_eq!(config.loss_weights.noise_scale, 0.0);
    }

    #[test]
    fn experiment_config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("train.toml");
        std::fs::write(
            &config_path,
            "kind = \"euclidean\"\nn = 6\nepochs = 1\nepoch_size = 8\nbatch_size = 8\n\
             learning_rate = 1e-3\nd = 4\nlayers = 1\nseed = 0\nvalidation = \"x\"\n\
             checkpoint = \"a\"\nbest_checkpoint = \"b\"\nmetrics = \"c\"\nbogus_key = 3\n",
        )
        .unwrap();
        match ExperimentConfig::from_file(&config_path) {
            Err(CliError::Config(message)) => assert!(message.contains("bogus_key")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn experiment_config_requires_existing_validation_set() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("train.toml");
        std::fs::write(
            &config_path,
            "kind = \"asymmetric\"\nn = 6\nepochs = 1\nepoch_size = 8\nbatch_size = 8\n\
             learning_rate = 1e-3\nd = 4\nlayers = 1\nseed = 0\nvalidation = \"missing.ndj\"\n\
             checkpoint = \"a.ckpt\"\nbest_checkpoint = \"b.ckpt\"\nmetrics = \"m.csv\"\n",
        )
        .unwrap();
        let parsed = ExperimentConfig::from_file(&config_path).unwrap();
        assert!(matches!(
            parsed.into_train_config(),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn asymmetric_default_noise_is_applied() {
        let dir = tempfile::tempdir().unwrap();
        let val = dir.path().join("val.ndj");
        crate::instances::write_dataset(
            &val,
            &crate::instances::generate_asymmetric(6, 2, 1).unwrap(),
        )
        .unwrap();
        let config_path = dir.path().join("train.toml");
        std::fs::write(
            &config_path,
            format!(
                "kind = \"asymmetric\"\nn = 6\nepochs = 1\nepoch_size = 8\nbatch_size = 8\n\
                 learning_rate = 1e-3\nd = 4\nlayers = 1\nseed = 0\n\
                 validation = \"{}\"\ncheckpoint = \"{}\"\nbest_checkpoint = \"{}\"\nmetrics = \"{}\"\n",
                val.display(),
                dir.path().join("f.ckpt").display(),
                dir.path().join("b.ckpt").display(),
                dir.path().join("m.csv").display(),
            ),
        )
        .unwrap();
        let config = ExperimentConfig::from_file(&config_path)
            .unwrap()
            .into_train_config()
            .unwrap();
        assert_eq!(config.loss_weights.noise_scale, 0.1);
        assert!(matches!(config.kind, InstanceKind::Asymmetric));
    }
}
