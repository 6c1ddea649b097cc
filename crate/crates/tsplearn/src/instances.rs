//! Problem instances, exact oracles, classical baselines, and dataset I/O.
//!
//! Instances are complete directed graphs with non-negative edge costs.
//! Euclidean instances additionally carry planar coordinates in the unit
//! square from which the (symmetric) weight matrix is derived.
//!
//! All randomness goes through [`rand_chacha::ChaCha8Rng`], a portable
//! counter-based generator: the same seed produces the same instances on
//! every platform. Dataset generation draws record `i` from stream `i` of
//! the seeded generator, so sharded and serial generation agree bitwise.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::SquareMatrix;

/// Largest `n` accepted by [`held_karp`].
pub const HELD_KARP_MAX_N: usize = 22;
/// Largest `n` accepted by [`brute_force`].
pub const BRUTE_FORCE_MAX_N: usize = 10;

/// Tolerance used when validating declared optima against recomputed tour
/// lengths.
pub const OPT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("instance size must be at least {min}, got {got}")]
    TooSmall { min: usize, got: usize },
    #[error("instance count must be at least 1")]
    EmptyCount,
    #[error("weight ({i},{j}) = {value} must be finite and non-negative")]
    BadWeight { i: usize, j: usize, value: f64 },
    #[error("coordinate of node {node} must be finite")]
    BadCoordinate { node: usize },
    #[error("tour has {tour_len} nodes but instance has {n}")]
    TourMismatch { tour_len: usize, n: usize },
    #[error("tour is not a permutation of 0..{n}")]
    NotAPermutation { n: usize },
    #[error("{method} supports at most n = {max}, got n = {n}")]
    OracleLimit {
        method: &'static str,
        max: usize,
        n: usize,
    },
    #[error("start node {start} out of range for n = {n}")]
    StartOutOfRange { start: usize, n: usize },
    #[error("declared opt_len {declared} differs from opt_tour length {actual}")]
    OptimumMismatch { declared: f64, actual: f64 },
    #[error("optimality gap needs a positive optimum, got {opt}")]
    NonPositiveOptimum { opt: f64 },
    #[error("predicted length {pred} lies below the optimum {opt}")]
    BelowOptimum { pred: f64, opt: f64 },
    #[error("line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A directed Hamiltonian cycle: the visit order of all `n` nodes.
///
/// The cycle closes implicitly from the last node back to the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tour(Vec<usize>);

impl Tour {
    /// Validates that `order` is a permutation of `0..order.len()`.
    pub fn new(order: Vec<usize>) -> Result<Self, InstanceError> {
        let n = order.len();
        if n < 2 {
            return Err(InstanceError::TooSmall { min: 2, got: n });
        }
        let mut seen = vec![false; n];
        for &v in &order {
            if v >= n || seen[v] {
                return Err(InstanceError::NotAPermutation { n });
            }
            seen[v] = true;
        }
        Ok(Self(order))
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The same cycle rotated so it starts at node 0. Direction is kept.
    /// Useful for comparing tours irrespective of the starting node.
    pub fn canonical_rotation(&self) -> Tour {
        let pos = self.0.iter().position(|&v| v == 0).expect("0 in tour");
        let mut order = Vec::with_capacity(self.0.len());
        order.extend_from_slice(&self.0[pos..]);
        order.extend_from_slice(&self.0[..pos]);
        Tour(order)
    }
}

/// One TSP problem: a directed weight matrix, optional planar coordinates,
/// and an optional known optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct TspInstance {
    n: usize,
    coords: Option<Vec<[f64; 2]>>,
    weights: SquareMatrix,
    opt_len: Option<f64>,
    opt_tour: Option<Tour>,
}

impl TspInstance {
    /// Builds an asymmetric instance from an explicit weight matrix.
    /// The diagonal is ignored (stored as given but never read as a cost).
    pub fn from_weights(weights: SquareMatrix) -> Result<Self, InstanceError> {
        let n = weights.n();
        if n < 2 {
            return Err(InstanceError::TooSmall { min: 2, got: n });
        }
        for i in 0..n {
            for j in 0..n {
                let w = weights.get(i, j);
                if !w.is_finite() || w < 0.0 {
                    return Err(InstanceError::BadWeight { i, j, value: w });
                }
            }
        }
        Ok(Self {
            n,
            coords: None,
            weights,
            opt_len: None,
            opt_tour: None,
        })
    }

    /// Builds a Euclidean instance; weights are pairwise distances.
    pub fn from_coords(coords: Vec<[f64; 2]>) -> Result<Self, InstanceError> {
        let n = coords.len();
        if n < 2 {
            return Err(InstanceError::TooSmall { min: 2, got: n });
        }
        for (node, c) in coords.iter().enumerate() {
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(InstanceError::BadCoordinate { node });
            }
        }
        let weights = SquareMatrix::from_fn(n, |i, j| {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            (dx * dx + dy * dy).sqrt()
        });
        Ok(Self {
            n,
            coords: Some(coords),
            weights,
            opt_len: None,
            opt_tour: None,
        })
    }

    /// Attaches a known optimum. The tour length must match `opt_len`
    /// within [`OPT_TOLERANCE`].
    pub fn with_optimum(mut self, opt_len: f64, opt_tour: Option<Tour>) -> Result<Self, InstanceError> {
        if let Some(tour) = &opt_tour {
            let actual = tour_length(tour, &self)?;
            if (actual - opt_len).abs() > OPT_TOLERANCE {
                return Err(InstanceError::OptimumMismatch {
                    declared: opt_len,
                    actual,
                });
            }
        }
        self.opt_len = Some(opt_len);
        self.opt_tour = opt_tour;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coords(&self) -> Option<&[[f64; 2]]> {
        self.coords.as_deref()
    }

    pub fn weights(&self) -> &SquareMatrix {
        &self.weights
    }

    /// Cost of the directed edge `i -> j`.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights.get(i, j)
    }

    pub fn opt_len(&self) -> Option<f64> {
        self.opt_len
    }

    pub fn opt_tour(&self) -> Option<&Tour> {
        self.opt_tour.as_ref()
    }

    /// FNV-1a hash of the weight matrix bits. Stable across runs and
    /// platforms; used to assert train/validation disjointness.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(&(self.n as u64).to_le_bytes());
        for &w in self.weights.as_slice() {
            eat(&w.to_bits().to_le_bytes());
        }
        h
    }
}

/// Derives an independent sub-seed from a base seed and an index
/// (splitmix64 over the combined value). Used to give each record,
/// epoch, or step its own generator without correlations.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `count` Euclidean instances with `n` points drawn uniformly
/// from the unit square. Deterministic in `seed`; record `i` uses stream `i`.
pub fn generate_euclidean(n: usize, count: usize, seed: u64) -> Result<Vec<TspInstance>, InstanceError> {
    if n < 3 {
        return Err(InstanceError::TooSmall { min: 3, got: n });
    }
    if count == 0 {
        return Err(InstanceError::EmptyCount);
    }
    (0..count)
        .map(|i| {
            let mut rng = record_rng(seed, i as u64);
            let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
            TspInstance::from_coords(coords)
        })
        .collect()
}

/// Generates `count` asymmetric instances: every off-diagonal weight is an
/// independent uniform draw from `[0, 1)`. Deterministic in `seed`.
pub fn generate_asymmetric(n: usize, count: usize, seed: u64) -> Result<Vec<TspInstance>, InstanceError> {
    if n < 3 {
        return Err(InstanceError::TooSmall { min: 3, got: n });
    }
    if count == 0 {
        return Err(InstanceError::EmptyCount);
    }
    (0..count)
        .map(|i| {
            let mut rng = record_rng(seed, i as u64);
            let mut weights = SquareMatrix::zeros(n);
            for a in 0..n {
                for b in 0..n {
                    if a != b {
                        weights.set(a, b, rng.gen::<f64>());
                    }
                }
            }
            TspInstance::from_weights(weights)
        })
        .collect()
}

/// Length of the directed cycle `tour` under the instance weights,
/// including the closing edge.
pub fn tour_length(tour: &Tour, inst: &TspInstance) -> Result<f64, InstanceError> {
    if tour.len() != inst.n() {
        return Err(InstanceError::TourMismatch {
            tour_len: tour.len(),
            n: inst.n(),
        });
    }
    let order = tour.order();
    let mut total = 0.0;
    for k in 0..order.len() {
        let from = order[k];
        let to = order[(k + 1) % order.len()];
        total += inst.weight(from, to);
    }
    Ok(total)
}

/// Exact directed TSP via Held-Karp dynamic programming over node subsets.
///
/// `O(2^n n^2)` time and `O(2^n n)` memory; refuses `n > 22`.
pub fn held_karp(inst: &TspInstance) -> Result<(Tour, f64), InstanceError> {
    let n = inst.n();
    if n > HELD_KARP_MAX_N {
        return Err(InstanceError::OracleLimit {
            method: "held_karp",
            max: HELD_KARP_MAX_N,
            n,
        });
    }
    if n == 2 {
        let tour = Tour::new(vec![0, 1])?;
        let cost = inst.weight(0, 1) + inst.weight(1, 0);
        return Ok((tour, cost));
    }

    // dp[mask][last]: cheapest path 0 -> ... -> (last+1) visiting exactly
    // the nodes of `mask` (bit v stands for node v+1).
    let m = n - 1;
    let full = 1usize << m;
    let mut dp = vec![f64::INFINITY; full * m];
    let mut parent = vec![u8::MAX; full * m];
    for v in 0..m {
        dp[(1 << v) * m + v] = inst.weight(0, v + 1);
    }
    for mask in 1..full {
        for last in 0..m {
            if mask & (1 << last) == 0 {
                continue;
            }
            let cur = dp[mask * m + last];
            if !cur.is_finite() {
                continue;
            }
            let mut rem = !mask & (full - 1);
            while rem != 0 {
                let next = rem.trailing_zeros() as usize;
                rem &= rem - 1;
                let cand = cur + inst.weight(last + 1, next + 1);
                let idx = (mask | (1 << next)) * m + next;
                if cand < dp[idx] {
                    dp[idx] = cand;
                    parent[idx] = last as u8;
                }
            }
        }
    }

    let full_mask = full - 1;
    let mut best_cost = f64::INFINITY;
    let mut best_last = 0;
    for last in 0..m {
        let cand = dp[full_mask * m + last] + inst.weight(last + 1, 0);
        if cand < best_cost {
            best_cost = cand;
            best_last = last;
        }
    }

    let mut order_rev = Vec::with_capacity(n);
    let mut mask = full_mask;
    let mut last = best_last;
    loop {
        order_rev.push(last + 1);
        let p = parent[mask * m + last];
        mask &= !(1 << last);
        if p == u8::MAX {
            break;
        }
        last = p as usize;
    }
    order_rev.push(0);
    order_rev.reverse();
    let tour = Tour::new(order_rev)?;
    Ok((tour, best_cost))
}

/// Exact directed TSP by exhaustive search over all `(n-1)!` cyclic orders
/// with node 0 fixed first. Partial sums prune branches that already exceed
/// the best cycle found (sound for non-negative weights). Refuses `n > 10`.
pub fn brute_force(inst: &TspInstance) -> Result<(Tour, f64), InstanceError> {
    let n = inst.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(InstanceError::OracleLimit {
            method: "brute_force",
            max: BRUTE_FORCE_MAX_N,
            n,
        });
    }

    struct Search<'a> {
        inst: &'a TspInstance,
        used: Vec<bool>,
        order: Vec<usize>,
        best_cost: f64,
        best_order: Vec<usize>,
    }

    impl Search<'_> {
        fn descend(&mut self, partial: f64) {
            let n = self.inst.n();
            if partial >= self.best_cost {
                return;
            }
            if self.order.len() == n {
                let total = partial + self.inst.weight(*self.order.last().unwrap(), 0);
                if total < self.best_cost {
                    self.best_cost = total;
                    self.best_order = self.order.clone();
                }
                return;
            }
            let from = *self.order.last().unwrap();
            for next in 1..n {
                if !self.used[next] {
                    self.used[next] = true;
                    self.order.push(next);
                    self.descend(partial + self.inst.weight(from, next));
                    self.order.pop();
                    self.used[next] = false;
                }
            }
        }
    }

    let mut search = Search {
        inst,
        used: vec![false; n],
        order: vec![0],
        best_cost: f64::INFINITY,
        best_order: Vec::new(),
    };
    search.used[0] = true;
    search.descend(0.0);

    let tour = Tour::new(search.best_order)?;
    Ok((tour, search.best_cost))
}

/// Nearest-neighbor construction: from the current node repeatedly move
/// along the cheapest edge to an unvisited node, ties broken by lowest
/// node index.
pub fn greedy_nearest(inst: &TspInstance, start: usize) -> Result<Tour, InstanceError> {
    let n = inst.n();
    if start >= n {
        return Err(InstanceError::StartOutOfRange { start, n });
    }
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut current = start;
    visited[current] = true;
    order.push(current);
    for _ in 1..n {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if visited[j] {
                continue;
            }
            let w = inst.weight(current, j);
            if best.map_or(true, |(_, bw)| w < bw) {
                best = Some((j, w));
            }
        }
        let (next, _) = best.expect("unvisited node exists");
        visited[next] = true;
        order.push(next);
        current = next;
    }
    Tour::new(order)
}

/// Uniformly random tour (Fisher-Yates over the identity permutation),
/// deterministic in `seed`.
pub fn random_tour(n: usize, seed: u64) -> Result<Tour, InstanceError> {
    if n < 3 {
        return Err(InstanceError::TooSmall { min: 3, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    Tour::new(order)
}

/// Optimality gap in percent: `100 * (pred / opt - 1)`.
pub fn optimality_gap(pred: f64, opt: f64) -> Result<f64, InstanceError> {
    if !(opt > 0.0) {
        return Err(InstanceError::NonPositiveOptimum { opt });
    }
    if pred < opt - OPT_TOLERANCE {
        return Err(InstanceError::BelowOptimum { pred, opt });
    }
    Ok(100.0 * (pred / opt - 1.0))
}

// ---------------------------------------------------------------------------
// Dataset files: newline-delimited records, one JSON object per line with
// fields `n`, exactly one of `coords` / `matrix`, optional `opt_len` and
// `opt_tour`. Floats are written in scientific notation with 17 significant
// digits so the round trip is lossless.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    coords: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    matrix: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    opt_len: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    opt_tour: Option<Vec<usize>>,
}

struct PreciseFloats;

impl serde_json::ser::Formatter for PreciseFloats {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        // 1 leading + 16 fractional digits: enough for any f64 to round-trip.
        write!(writer, "{:.16e}", value)
    }
}

fn record_to_line(record: &DatasetRecord) -> std::io::Result<String> {
    let mut buf = Vec::with_capacity(256);
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFloats);
    record
        .serialize(&mut ser)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    Ok(String::from_utf8(buf).expect("serializer emits UTF-8"))
}

fn instance_to_record(inst: &TspInstance) -> DatasetRecord {
    let matrix = if inst.coords().is_some() {
        None
    } else {
        Some((0..inst.n()).map(|i| inst.weights.row(i).to_vec()).collect())
    };
    DatasetRecord {
        n: inst.n(),
        coords: inst.coords().map(|c| c.to_vec()),
        matrix,
        opt_len: inst.opt_len(),
        opt_tour: inst.opt_tour().map(|t| t.order().to_vec()),
    }
}

fn dataset_err(line: usize, message: impl Into<String>) -> InstanceError {
    InstanceError::Dataset {
        line,
        message: message.into(),
    }
}

fn record_to_instance(record: DatasetRecord, line: usize) -> Result<TspInstance, InstanceError> {
    let n = record.n;
    let inst = match (record.coords, record.matrix) {
        (Some(coords), None) => {
            if coords.len() != n {
                return Err(dataset_err(line, format!("coords has {} rows, n = {}", coords.len(), n)));
            }
            TspInstance::from_coords(coords).map_err(|e| dataset_err(line, e.to_string()))?
        }
        (None, Some(matrix)) => {
            if matrix.len() != n || matrix.iter().any(|row| row.len() != n) {
                return Err(dataset_err(line, format!("matrix is not {n} x {n}")));
            }
            let weights = SquareMatrix::from_flat(n, matrix.into_iter().flatten().collect());
            TspInstance::from_weights(weights).map_err(|e| dataset_err(line, e.to_string()))?
        }
        (Some(_), Some(_)) => return Err(dataset_err(line, "record has both coords and matrix")),
        (None, None) => return Err(dataset_err(line, "record has neither coords nor matrix")),
    };
    match (record.opt_len, record.opt_tour) {
        (Some(len), tour_order) => {
            let tour = tour_order
                .map(|order| Tour::new(order).map_err(|e| dataset_err(line, e.to_string())))
                .transpose()?;
            if let Some(t) = &tour {
                if t.len() != n {
                    return Err(dataset_err(line, format!("opt_tour has {} nodes, n = {}", t.len(), n)));
                }
            }
            inst.with_optimum(len, tour).map_err(|e| dataset_err(line, e.to_string()))
        }
        (None, Some(_)) => Err(dataset_err(line, "opt_tour given without opt_len")),
        (None, None) => Ok(inst),
    }
}

/// Writes instances to `path`, one record per line. Rewrites byte-identically
/// for identical inputs.
pub fn write_dataset(path: impl AsRef<Path>, instances: &[TspInstance]) -> Result<(), InstanceError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        let line = record_to_line(&instance_to_record(inst))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. Malformed records are
/// reported with their 1-based line number.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TspInstance>, InstanceError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| dataset_err(line_no, e.to_string()))?;
        instances.push(record_to_instance(record, line_no)?);
    }
    Ok(instances)
}

/// Formats a gap table value the way reports print them (three decimals).
pub fn format_gap(gap: f64) -> String {
    let mut s = String::new();
    write!(s, "{:.3}", gap).expect("write to string");
    s
}
