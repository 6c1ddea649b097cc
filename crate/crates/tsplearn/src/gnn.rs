//! Graph neural network over edge and node embeddings.
//!
//! Nodes and edges carry `d`-dimensional embeddings. Each layer sends a
//! message along every edge in both directions, pools the messages per
//! node, proposes a new embedding for every edge from the pooled endpoint
//! states, and blends it with the previous embedding through a learned
//! sigmoid gate. A two-affine-layer decoder turns final edge embeddings
//! into per-edge class logits; the class-1 softmax probability is the
//! relaxed solution value.
//!
//! Edge embeddings for an `n`-node instance are stored as an `n^2 x d`
//! matrix with edge `(i, j)` in row `i * n + j`. Per-node pooling and
//! per-edge tiling are expressed as matrix products with constant 0/1
//! selector matrices, which keeps every step inside the autodiff engine.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{self, BoundMlp, DiffError, Graph, Mlp, Tensor, Var};
use crate::instances::TspInstance;
use crate::loss::{gumbel_softmax_edges, symmetrize_logits, EdgeLogits};
use crate::matrix::SquareMatrix;
use crate::subtour::SolutionMatrix;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("adjacency matrix has no nonzero off-diagonal weight")]
    AllZeroWeights,
    #[error("model expects planar coordinates but the instance has none")]
    MissingCoords,
    #[error("embedding state is {got} nodes x {got_d} dims, expected d = {expected_d}")]
    StateShape {
        got: usize,
        got_d: usize,
        expected_d: usize,
    },
    #[error("layer index {index} out of range (model has {layers} layers)")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// How initial node embeddings are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeFeatures {
    /// Linear projection of planar coordinates (Euclidean instances).
    Coords,
    /// One learned vector shared by all nodes (asymmetric instances,
    /// where all information lives in the edge weights).
    Constant,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnnConfig {
    /// Embedding dimension `d`.
    pub d: usize,
    /// Number of message-passing layers.
    pub layers: usize,
    /// Hidden width of the per-layer perceptrons (defaults to `d`).
    pub hidden: usize,
    /// Symmetrize decoder logits (use for symmetric instances).
    pub symmetric: bool,
    pub node_features: NodeFeatures,
    /// Fixed sharpness `a` of the edge gate `sigma(a * A)`.
    pub gate_scale: f64,
    /// Gumbel noise magnitude used during training.
    pub noise_scale: f64,
}

impl GnnConfig {
    pub fn euclidean(d: usize, layers: usize) -> Self {
        Self {
            d,
            layers,
            hidden: d,
            symmetric: true,
            node_features: NodeFeatures::Coords,
            gate_scale: 10.0,
            noise_scale: 0.0,
        }
    }

    pub fn asymmetric(d: usize, layers: usize) -> Self {
        Self {
            symmetric: false,
            node_features: NodeFeatures::Constant,
            noise_scale: 0.1,
            ..Self::euclidean(d, layers)
        }
    }
}

/// One layer: four perceptrons plus the two gate vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Messages along outgoing edges `e_ik`.
    pub mlp_out: Mlp,
    /// Messages along incoming edges `e_ki`.
    pub mlp_in: Mlp,
    /// Edge update candidate from `[e_ij, vertex_i, vertex_j]`.
    pub mlp_edge: Mlp,
    /// Node update from the pooled vertex state.
    pub mlp_node: Mlp,
    /// Gate vector `A` (length `d`).
    pub gate_a: Tensor,
    /// Update weight vector `B` (length `d`).
    pub gate_b: Tensor,
}

/// All learnable tensors plus the architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    config: GnnConfig,
    node_w: Option<Tensor>,
    node_b: Option<Tensor>,
    node_const: Option<Tensor>,
    edge_w: Tensor,
    edge_b: Tensor,
    layers: Vec<LayerParams>,
    decoder: Mlp,
}

/// Node embeddings `h` (`n x d`) and edge embeddings `e` (`n^2 x d`,
/// edge `(i, j)` in row `i * n + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    pub h: Tensor,
    pub e: Tensor,
}

impl EmbeddingState {
    pub fn n(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.h.shape()[1]
    }
}

impl GnnModel {
    /// Fresh model with uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// initialization, deterministic in `seed`.
    pub fn init(config: GnnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let hidden = config.hidden;

        let (node_w, node_b, node_const) = match config.node_features {
            NodeFeatures::Coords => {
                let bound = 1.0 / 2f64.sqrt();
                (
                    Some(Tensor::uniform(vec![2, d], bound, &mut rng)),
                    Some(Tensor::uniform(vec![d], bound, &mut rng)),
                    None,
                )
            }
            NodeFeatures::Constant => (
                None,
                None,
                Some(Tensor::uniform(vec![1, d], 1.0, &mut rng)),
            ),
        };
        let edge_w = Tensor::uniform(vec![1, d], 1.0, &mut rng);
        let edge_b = Tensor::uniform(vec![d], 1.0, &mut rng);

        let layers = (0..config.layers)
            .map(|_| LayerParams {
                mlp_out: Mlp::init(d, hidden, d, &mut rng),
                mlp_in: Mlp::init(d, hidden, d, &mut rng),
                mlp_edge: Mlp::init(7 * d, hidden, d, &mut rng),
                mlp_node: Mlp::init(3 * d, hidden, d, &mut rng),
                gate_a: Tensor::uniform(vec![d], 1.0 / (d as f64).sqrt(), &mut rng),
                gate_b: Tensor::uniform(vec![d], 1.0 / (d as f64).sqrt(), &mut rng),
            })
            .collect();

        let decoder = Mlp::init(d, d, 2, &mut rng);

        Self {
            config,
            node_w,
            node_b,
            node_const,
            edge_w,
            edge_b,
            layers,
            decoder,
        }
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    pub fn layer_params(&self, index: usize) -> Option<&LayerParams> {
        self.layers.get(index)
    }

    /// All learnable tensors in a fixed order (checkpoints, Adam, and
    /// gradient collection all share it).
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(w) = &self.node_w {
            out.push(("node.w".into(), w));
        }
        if let Some(b) = &self.node_b {
            out.push(("node.b".into(), b));
        }
        if let Some(c) = &self.node_const {
            out.push(("node.const".into(), c));
        }
        out.push(("edge.w".into(), &self.edge_w));
        out.push(("edge.b".into(), &self.edge_b));
        for (idx, layer) in self.layers.iter().enumerate() {
            for (mlp_name, mlp) in [
                ("out", &layer.mlp_out),
                ("in", &layer.mlp_in),
                ("edge", &layer.mlp_edge),
                ("node", &layer.mlp_node),
            ] {
                for (tname, tensor) in mlp.tensors() {
                    out.push((format!("layer{idx}.{mlp_name}.{tname}"), tensor));
                }
            }
            out.push((format!("layer{idx}.gate_a"), &layer.gate_a));
            out.push((format!("layer{idx}.gate_b"), &layer.gate_b));
        }
        for (tname, tensor) in self.decoder.tensors() {
            out.push((format!("decoder.{tname}"), tensor));
        }
        out
    }

    /// Mutable view of the same tensors, same order as
    /// [`GnnModel::named_parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(w) = &mut self.node_w {
            out.push(w);
        }
        if let Some(b) = &mut self.node_b {
            out.push(b);
        }
        if let Some(c) = &mut self.node_const {
            out.push(c);
        }
        out.push(&mut self.edge_w);
        out.push(&mut self.edge_b);
        for layer in &mut self.layers {
            for mlp in [
                &mut layer.mlp_out,
                &mut layer.mlp_in,
                &mut layer.mlp_edge,
                &mut layer.mlp_node,
            ] {
                for (_, tensor) in mlp.tensors_mut() {
                    out.push(tensor);
                }
            }
            out.push(&mut layer.gate_a);
            out.push(&mut layer.gate_b);
        }
        for (_, tensor) in self.decoder.tensors_mut() {
            out.push(tensor);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Writes the model as a tensor manifest with the architecture in the
    /// metadata. Loading restores it bit-exactly.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), GnnError> {
        let c = &self.config;
        let meta = vec![
            ("model".to_string(), "gnn".to_string()),
            ("d".to_string(), c.d.to_string()),
            ("layers".to_string(), c.layers.to_string()),
            ("hidden".to_string(), c.hidden.to_string()),
            ("symmetric".to_string(), c.symmetric.to_string()),
            (
                "node_features".to_string(),
                match c.node_features {
                    NodeFeatures::Coords => "coords".to_string(),
                    NodeFeatures::Constant => "constant".to_string(),
                },
            ),
            ("gate_scale".to_string(), format!("{:.16e}", c.gate_scale)),
            ("noise_scale".to_string(), format!("{:.16e}", c.noise_scale)),
        ];
        let named: Vec<(String, &Tensor)> = self.named_parameters();
        diffcore::write_manifest(path, &meta, &named)?;
        Ok(())
    }

    /// Reads a model saved by [`GnnModel::save`].
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, GnnError> {
        let (meta, tensors) = diffcore::read_manifest(path)?;
        let lookup = |key: &str| -> Result<&str, GnnError> {
            meta.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| GnnError::Checkpoint(format!("missing meta key `{key}`")))
        };
        let parse_usize = |key: &str| -> Result<usize, GnnError> {
            lookup(key)?
                .parse()
                .map_err(|_| GnnError::Checkpoint(format!("bad meta value for `{key}`")))
        };
        let parse_f64 = |key: &str| -> Result<f64, GnnError> {
            lookup(key)?
                .parse()
                .map_err(|_| GnnError::Checkpoint(format!("bad meta value for `{key}`")))
        };

        let node_features = match lookup("node_features")? {
            "coords" => NodeFeatures::Coords,
            "constant" => NodeFeatures::Constant,
            other => {
                return Err(GnnError::Checkpoint(format!(
                    "unknown node_features `{other}`"
                )))
            }
        };
        let config = GnnConfig {
            d: parse_usize("d")?,
            layers: parse_usize("layers")?,
            hidden: parse_usize("hidden")?,
            symmetric: lookup("symmetric")? == "true",
            node_features,
            gate_scale: parse_f64("gate_scale")?,
            noise_scale: parse_f64("noise_scale")?,
        };

        // Start from a deterministic skeleton and fill every tensor from
        // the manifest, validating names and shapes.
        let mut model = GnnModel::init(config, 0);
        let expected: Vec<String> = model
            .named_parameters()
            .iter()
            .map(|(name, _)| name.clone())
            .collect();
        let expected_shapes: Vec<Vec<usize>> = model
            .named_parameters()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        if tensors.len() != expected.len() {
            return Err(GnnError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, tensor), (expected_name, expected_shape)) in
            tensors.iter().zip(expected.iter().zip(&expected_shapes))
        {
            if name != expected_name {
                return Err(GnnError::Checkpoint(format!(
                    "expected tensor `{expected_name}`, found `{name}`"
                )));
            }
            if tensor.shape() != expected_shape.as_slice() {
                return Err(GnnError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    expected_shape
                )));
            }
        }
        for (slot, (_, tensor)) in model.parameters_mut().into_iter().zip(tensors) {
            *slot = tensor;
        }
        Ok(model)
    }
}

/// Scales edge costs by the root mean square over all matrix entries
/// (diagonal counted as zero): `norm_c = c / sqrt(mean(c^2))`. Invariant
/// under uniform rescaling of the costs.
pub fn normalize_adjacency(inst: &TspInstance) -> Result<SquareMatrix, GnnError> {
    let n = inst.n();
    let mut sum_sq = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let c = inst.weight(i, j);
                sum_sq += c * c;
            }
        }
    }
    if sum_sq == 0.0 {
        return Err(GnnError::AllZeroWeights);
    }
    let denom = (sum_sq / n as f64).sqrt();
    Ok(SquareMatrix::from_fn(n, |i, j| {
        if i == j {
            0.0
        } else {
            inst.weight(i, j) / denom
        }
    }))
}

/// Constant 0/1 selector matrices that express pooling and tiling as
/// matrix products for a fixed instance size.
struct Selectors {
    /// `[n, n^2]`, row `i` selects all rows `i * n + k` (outgoing edges).
    sum_out: Var,
    /// `[n, n^2]`, row `i` selects all rows `k * n + i` (incoming edges).
    sum_in: Var,
    /// `[n^2, n]`, row `i * n + j` selects node `i`.
    tile_row: Var,
    /// `[n^2, n]`, row `i * n + j` selects node `j`.
    tile_col: Var,
}

fn build_selectors(graph: &mut Graph, n: usize) -> Result<Selectors, DiffError> {
    let mut sum_out = vec![0.0; n * n * n];
    let mut sum_in = vec![0.0; n * n * n];
    let mut tile_row = vec![0.0; n * n * n];
    let mut tile_col = vec![0.0; n * n * n];
    for i in 0..n {
        for k in 0..n {
            sum_out[i * (n * n) + i * n + k] = 1.0;
            sum_in[i * (n * n) + k * n + i] = 1.0;
        }
    }
    for i in 0..n {
        for j in 0..n {
            tile_row[(i * n + j) * n + i] = 1.0;
            tile_col[(i * n + j) * n + j] = 1.0;
        }
    }
    Ok(Selectors {
        sum_out: graph.constant(Tensor::new(vec![n, n * n], sum_out)?)?,
        sum_in: graph.constant(Tensor::new(vec![n, n * n], sum_in)?)?,
        tile_row: graph.constant(Tensor::new(vec![n * n, n], tile_row)?)?,
        tile_col: graph.constant(Tensor::new(vec![n * n, n], tile_col)?)?,
    })
}

struct BoundLayer {
    mlp_out: BoundMlp,
    mlp_in: BoundMlp,
    mlp_edge: BoundMlp,
    mlp_node: BoundMlp,
    gate_a: Var,
    gate_b: Var,
}

/// A model bound into one graph, ready to run on one instance.
struct BoundGnn {
    node_w: Option<Var>,
    node_b: Option<Var>,
    node_const: Option<Var>,
    edge_w: Var,
    edge_b: Var,
    layers: Vec<BoundLayer>,
    decoder: BoundMlp,
}

impl BoundGnn {
    fn bind(graph: &mut Graph, model: &GnnModel, trainable: bool) -> Result<Self, DiffError> {
        let bind_opt = |t: &Option<Tensor>, g: &mut Graph| -> Result<Option<Var>, DiffError> {
            t.as_ref().map(|t| g.leaf(t.clone(), trainable)).transpose()
        };
        Ok(Self {
            node_w: bind_opt(&model.node_w, graph)?,
            node_b: bind_opt(&model.node_b, graph)?,
            node_const: bind_opt(&model.node_const, graph)?,
            edge_w: graph.leaf(model.edge_w.clone(), trainable)?,
            edge_b: graph.leaf(model.edge_b.clone(), trainable)?,
            layers: model
                .layers
                .iter()
                .map(|layer| {
                    Ok(BoundLayer {
                        mlp_out: BoundMlp::bind(graph, &layer.mlp_out, trainable)?,
                        mlp_in: BoundMlp::bind(graph, &layer.mlp_in, trainable)?,
                        mlp_edge: BoundMlp::bind(graph, &layer.mlp_edge, trainable)?,
                        mlp_node: BoundMlp::bind(graph, &layer.mlp_node, trainable)?,
                        gate_a: graph.leaf(layer.gate_a.clone(), trainable)?,
                        gate_b: graph.leaf(layer.gate_b.clone(), trainable)?,
                    })
                })
                .collect::<Result<_, DiffError>>()?,
            decoder: BoundMlp::bind(graph, &model.decoder, trainable)?,
        })
    }

    /// `(name, Var)` pairs in [`GnnModel::named_parameters`] order.
    fn param_vars(&self, model: &GnnModel) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = Vec::new();
        if let Some(v) = self.node_w {
            out.push(("node.w".into(), v));
        }
        if let Some(v) = self.node_b {
            out.push(("node.b".into(), v));
        }
        if let Some(v) = self.node_const {
            out.push(("node.const".into(), v));
        }
        out.push(("edge.w".into(), self.edge_w));
        out.push(("edge.b".into(), self.edge_b));
        for (idx, layer) in self.layers.iter().enumerate() {
            for (mlp_name, mlp) in [
                ("out", &layer.mlp_out),
                ("in", &layer.mlp_in),
                ("edge", &layer.mlp_edge),
                ("node", &layer.mlp_node),
            ] {
                out.push((format!("layer{idx}.{mlp_name}.w1"), mlp.w1));
                out.push((format!("layer{idx}.{mlp_name}.b1"), mlp.b1));
                out.push((format!("layer{idx}.{mlp_name}.w2"), mlp.w2));
                out.push((format!("layer{idx}.{mlp_name}.b2"), mlp.b2));
            }
            out.push((format!("layer{idx}.gate_a"), layer.gate_a));
            out.push((format!("layer{idx}.gate_b"), layer.gate_b));
        }
        out.push(("decoder.w1".into(), self.decoder.w1));
        out.push(("decoder.b1".into(), self.decoder.b1));
        out.push(("decoder.w2".into(), self.decoder.w2));
        out.push(("decoder.b2".into(), self.decoder.b2));
        debug_assert_eq!(out.len(), model.named_parameters().len());
        out
    }

    fn init_embeddings(
        &self,
        graph: &mut Graph,
        model: &GnnModel,
        inst: &TspInstance,
    ) -> Result<(Var, Var), GnnError> {
        let n = inst.n();
        let norm_c = normalize_adjacency(inst)?;

        let h = match model.config.node_features {
            NodeFeatures::Coords => {
                let coords = inst.coords().ok_or(GnnError::MissingCoords)?;
                let data: Vec<f64> = coords.iter().flat_map(|c| [c[0], c[1]]).collect();
                let coords_var = graph.constant(Tensor::new(vec![n, 2], data)?)?;
                let projected = graph.matmul(coords_var, self.node_w.expect("coords model"))?;
                graph.add_row(projected, self.node_b.expect("coords model"))?
            }
            NodeFeatures::Constant => {
                let ones = graph.constant(Tensor::new(vec![n, 1], vec![1.0; n])?)?;
                graph.matmul(ones, self.node_const.expect("constant model"))?
            }
        };

        let norm_col = graph.constant(Tensor::new(vec![n * n, 1], norm_c.as_slice().to_vec())?)?;
        let e = graph.matmul(norm_col, self.edge_w)?;
        let e = graph.add_row(e, self.edge_b)?;
        Ok((h, e))
    }

    fn layer(
        &self,
        graph: &mut Graph,
        model: &GnnModel,
        selectors: &Selectors,
        index: usize,
        h: Var,
        e: Var,
        n: usize,
    ) -> Result<(Var, Var), GnnError> {
        let layer = &self.layers[index];
        let inv_sqrt_n = 1.0 / (n as f64).sqrt();

        let msg_out = layer.mlp_out.forward(graph, e)?;
        let out_state = graph.matmul(selectors.sum_out, msg_out)?;
        let out_state = graph.scale(out_state, inv_sqrt_n)?;

        let msg_in = layer.mlp_in.forward(graph, e)?;
        let in_state = graph.matmul(selectors.sum_in, msg_in)?;
        let in_state = graph.scale(in_state, inv_sqrt_n)?;

        let vertex = graph.concat_cols(&[in_state, out_state, h])?;

        let tile_i = graph.matmul(selectors.tile_row, vertex)?;
        let tile_j = graph.matmul(selectors.tile_col, vertex)?;
        let candidate_input = graph.concat_cols(&[e, tile_i, tile_j])?;
        let candidate = layer.mlp_edge.forward(graph, candidate_input)?;

        let gate_pre = graph.scale(layer.gate_a, model.config.gate_scale)?;
        let gate = graph.sigmoid(gate_pre)?;
        let kept = graph.mul_row(e, gate)?;
        let update = graph.mul_row(candidate, layer.gate_b)?;
        let e_next = graph.add(kept, update)?;

        let h_next = layer.mlp_node.forward(graph, vertex)?;
        Ok((h_next, e_next))
    }

    /// Decoder logits as two `[n, n]` matrices (class 0, class 1),
    /// optionally symmetrized.
    fn decode(
        &self,
        graph: &mut Graph,
        e: Var,
        n: usize,
        symmetric: bool,
    ) -> Result<(Var, Var), GnnError> {
        let logits = self.decoder.forward(graph, e)?; // [n^2, 2]
        let pick0 = graph.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0])?)?;
        let pick1 = graph.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0])?)?;
        let mut z0 = graph.matmul(logits, pick0)?;
        let mut z1 = graph.matmul(logits, pick1)?;
        z0 = graph.reshape(z0, vec![n, n])?;
        z1 = graph.reshape(z1, vec![n, n])?;
        if symmetric {
            for z in [&mut z0, &mut z1] {
                let t = graph.transpose(*z)?;
                let sum = graph.add(*z, t)?;
                *z = graph.scale(sum, 0.5)?;
            }
        }
        Ok((z0, z1))
    }
}

/// Output of a graph-recorded forward pass.
pub struct GnnForward {
    /// The relaxed solution, shape `[n, n]`, diagonal zero.
    pub x: Var,
    /// Parameter leaves in [`GnnModel::named_parameters`] order.
    pub params: Vec<(String, Var)>,
}

impl GnnModel {
    /// Records the full forward pass on `graph` with trainable parameter
    /// leaves. `noise` carries pre-sampled Gumbel pairs scaled by
    /// `config.noise_scale` when present.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        inst: &TspInstance,
        noise: Option<&(SquareMatrix, SquareMatrix)>,
    ) -> Result<GnnForward, GnnError> {
        let n = inst.n();
        let bound = BoundGnn::bind(graph, self, true)?;
        let selectors = build_selectors(graph, n)?;
        let (mut h, mut e) = bound.init_embeddings(graph, self, inst)?;
        for index in 0..self.config.layers {
            (h, e) = bound.layer(graph, self, &selectors, index, h, e, n)?;
        }
        let (mut z0, mut z1) = bound.decode(graph, e, n, self.config.symmetric)?;

        if let Some((g0, g1)) = noise {
            let scale = self.config.noise_scale;
            let scaled = |m: &SquareMatrix| -> Result<Tensor, DiffError> {
                Tensor::new(vec![n, n], m.as_slice().iter().map(|v| scale * v).collect())
            };
            let n0 = graph.constant(scaled(g0)?)?;
            let n1 = graph.constant(scaled(g1)?)?;
            z0 = graph.add(z0, n0)?;
            z1 = graph.add(z1, n1)?;
        }

        let margin = graph.sub(z1, z0)?;
        let prob = graph.sigmoid(margin)?;
        let mask = graph.constant(Tensor::new(
            vec![n, n],
            SquareMatrix::from_fn(n, |i, j| if i == j { 0.0 } else { 1.0 })
                .as_slice()
                .to_vec(),
        )?)?;
        let x = graph.mul(prob, mask)?;

        Ok(GnnForward {
            x,
            params: bound.param_vars(self),
        })
    }
}

/// Initial embeddings: projected coordinates (or the shared learned
/// vector) for nodes, projected normalized weights for edges.
pub fn init_embeddings(inst: &TspInstance, model: &GnnModel) -> Result<EmbeddingState, GnnError> {
    let mut graph = Graph::new();
    let bound = BoundGnn::bind(&mut graph, model, false)?;
    let (h, e) = bound.init_embeddings(&mut graph, model, inst)?;
    Ok(EmbeddingState {
        h: graph.value(h).clone(),
        e: graph.value(e).clone(),
    })
}

/// Applies message-passing layer `index` to the state.
pub fn gnn_layer(
    state: &EmbeddingState,
    model: &GnnModel,
    index: usize,
) -> Result<EmbeddingState, GnnError> {
    if index >= model.config.layers {
        return Err(GnnError::LayerOutOfRange {
            index,
            layers: model.config.layers,
        });
    }
    if state.d() != model.config.d {
        return Err(GnnError::StateShape {
            got: state.n(),
            got_d: state.d(),
            expected_d: model.config.d,
        });
    }
    let n = state.n();
    let mut graph = Graph::new();
    let bound = BoundGnn::bind(&mut graph, model, false)?;
    let selectors = build_selectors(&mut graph, n)?;
    let h = graph.leaf(state.h.clone(), false)?;
    let e = graph.leaf(state.e.clone(), false)?;
    let (h2, e2) = bound.layer(&mut graph, model, &selectors, index, h, e, n)?;
    Ok(EmbeddingState {
        h: graph.value(h2).clone(),
        e: graph.value(e2).clone(),
    })
}

/// Decodes final edge embeddings into per-edge class logits; symmetrizes
/// them when asked (so the downstream softmax is direction-independent).
pub fn decode_logits(
    state: &EmbeddingState,
    model: &GnnModel,
    symmetric: bool,
) -> Result<EdgeLogits, GnnError> {
    let n = state.n();
    let mut graph = Graph::new();
    let bound = BoundGnn::bind(&mut graph, model, false)?;
    let e = graph.leaf(state.e.clone(), false)?;
    // Symmetrization happens on the plain matrices below so that this op
    // composes bit-exactly with `symmetrize_logits`.
    let (z0, z1) = bound.decode(&mut graph, e, n, false)?;
    let to_matrix = |t: &Tensor| SquareMatrix::from_flat(n, t.data().to_vec());
    let logits = EdgeLogits::new(
        to_matrix(graph.value(z0)),
        to_matrix(graph.value(z1)),
    )
    .expect("decoder output is finite");
    Ok(if symmetric {
        symmetrize_logits(&logits)
    } else {
        logits
    })
}

/// Full forward pass: initial embeddings, `L` message-passing layers,
/// logit decoding, and Gumbel-softmax conversion to a solution matrix.
/// Deterministic given `(model, inst, noise_scale, seed)`.
pub fn forward(
    inst: &TspInstance,
    model: &GnnModel,
    noise_scale: f64,
    seed: u64,
) -> Result<SolutionMatrix, GnnError> {
    let mut state = init_embeddings(inst, model)?;
    for index in 0..model.config.layers {
        state = gnn_layer(&state, model, index)?;
    }
    let logits = decode_logits(&state, model, model.config.symmetric)?;
    Ok(gumbel_softmax_edges(&logits, noise_scale, seed))
}

/// Solution values extracted from a recorded forward pass.
pub fn solution_from_graph(graph: &Graph, x: Var) -> SolutionMatrix {
    let t = graph.value(x);
    let n = t.shape()[0];
    SolutionMatrix::new(SquareMatrix::from_flat(n, t.data().to_vec()))
        .expect("forward output is a valid solution")
}
