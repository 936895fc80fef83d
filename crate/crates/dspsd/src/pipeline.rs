//! Two-stage training orchestration and the serialized model bundle.
//!
//! Stage 1 walks the event stream in timestamp order and minimizes the
//! negative-sampled structure and opcode edge losses; stage 2 freezes the
//! embedding side and trains the LSTM aggregator plus the MLP classifier on
//! labeled contract accounts. A trained model round-trips through a
//! versioned JSON file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    classification_loss, margin_gradient, mlp_backward, mlp_forward, ClassifierError,
    ClassifierParams, DenseLayer,
};
use crate::numerics::{NumericsError, Rng, Tensor2};
use crate::opcode_embed::{
    aggregate_interactive, control_logic_matrix, convolve_features, interactive_embedding,
    mutual_attention, opcode_edge_loss, opcode_edge_loss_exact, opcode_edge_loss_exact_grads,
    ControlLogicMatrix, OpcodeError, OpcodeModelParams,
};
use crate::structure_embed::{
    edge_loss_exact, edge_loss_negsampled, NodeNoise, StructureError, StructureTable,
};
use crate::temporal::{
    compress_sequence, lstm_forward, lstm_gradients, SequenceModelParams, TemporalError,
};
use crate::txgraph::{AccountId, GraphError, Label, TemporalGraph, TransactionEvent};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model file error: {0}")]
    ModelFormat(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Opcode(#[from] OpcodeError),
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which loss terms stage 1 trains; mirrors the ablation rows of the
/// evaluation (structure-only and opcode-only baselines).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    StructureOnly,
    OpcodeOnly,
}

/// How stage 1 evaluates the softmax denominators. Negative sampling is the
/// production path; the exact path enumerates every node and is only
/// tractable on small graphs, where it doubles as the measurable oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Sampling {
    NegSampled,
    Exact,
}

/// Every knob of the two-stage pipeline. Unknown fields in a config file are
/// rejected; missing fields fall back to the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Structure embedding dimension.
    pub d_s: usize,
    /// Opcode feature maps (filters).
    pub d_o: usize,
    /// Opcode lexicon vector dimension.
    pub d_prime: usize,
    /// Convolution window width.
    pub r: usize,
    /// Maximum opcode sequence length; longer sequences are truncated.
    pub l_max: usize,
    pub lstm_hidden: usize,
    /// Temporal sequence length fed to the LSTM.
    pub seq_len: usize,
    /// Three hidden-layer widths, each 32 or 64.
    pub mlp_widths: Vec<usize>,
    pub lr: f64,
    /// Acceptable learning-rate range enforced by `validate`.
    pub lr_bounds: (f64, f64),
    /// Stage-1 minibatch size: each event trains on its own edge plus
    /// `batch_size - 1` edges resampled from the history so far; stage 2
    /// uses it as the supervised minibatch size.
    pub batch_size: usize,
    /// Negative samples per positive edge.
    pub neg_k: usize,
    /// L2 regularization factor on the supervised-stage parameters.
    pub lambda: f64,
    /// Drop probability on the LSTM output during stage 2.
    pub dropout: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Score candidates against a separate context table instead of sharing
    /// one vector per node.
    pub use_context_table: bool,
    /// Restrict negative samples to nodes already active at the event time.
    pub negatives_from_snapshot: bool,
    /// Stage-1 denominator strategy; `Exact` is for small graphs and tests.
    pub stage1_sampling: Stage1Sampling,
}

impl Default for TrainConfig {
    /// Paper-scale defaults; see [`TrainConfig::synthetic`] for the
    /// desk-scale preset used with the bundled synthetic recipe.
    fn default() -> Self {
        TrainConfig {
            d_s: 100,
            d_o: 100,
            d_prime: 100,
            r: 2,
            l_max: 300,
            lstm_hidden: 32,
            seq_len: 32,
            mlp_widths: vec![64, 32, 32],
            lr: 0.01,
            lr_bounds: (0.001, 0.01),
            batch_size: 64,
            neg_k: 5,
            lambda: 1e-4,
            dropout: 0.75,
            epochs_stage1: 20,
            epochs_stage2: 200,
            seed: 7,
            ablation: Ablation::Full,
            use_context_table: false,
            negatives_from_snapshot: false,
            stage1_sampling: Stage1Sampling::NegSampled,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset for the synthetic recipe: small embedding
    /// dimensions keep a full 10-fold cross-validation within minutes.
    pub fn synthetic() -> Self {
        TrainConfig {
            d_s: 16,
            d_o: 16,
            d_prime: 16,
            r: 2,
            l_max: 24,
            lstm_hidden: 16,
            seq_len: 12,
            mlp_widths: vec![32, 32, 32],
            lr: 0.01,
            batch_size: 8,
            neg_k: 3,
            dropout: 0.5,
            epochs_stage1: 2,
            epochs_stage2: 150,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            ("d_s", self.d_s),
            ("d_o", self.d_o),
            ("d_prime", self.d_prime),
            ("r", self.r),
            ("l_max", self.l_max),
            ("lstm_hidden", self.lstm_hidden),
            ("seq_len", self.seq_len),
            ("batch_size", self.batch_size),
            ("neg_k", self.neg_k),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        if self.l_max < self.r {
            return Err(PipelineError::Config(format!(
                "l_max ({}) must be at least the filter width r ({})",
                self.l_max, self.r
            )));
        }
        if self.mlp_widths.len() != 3 || self.mlp_widths.iter().any(|w| ![32, 64].contains(w)) {
            return Err(PipelineError::Config(format!(
                "mlp_widths must be 3 layers of width 32 or 64, got {:?}",
                self.mlp_widths
            )));
        }
        let (lo, hi) = self.lr_bounds;
        if !(lo > 0.0 && hi >= lo) {
            return Err(PipelineError::Config(format!(
                "invalid lr_bounds {:?}",
                self.lr_bounds
            )));
        }
        if !(self.lr >= lo && self.lr <= hi) {
            return Err(PipelineError::Config(format!(
                "lr {} outside bounds [{lo}, {hi}]",
                self.lr
            )));
        }
        if self.lambda < 0.0 {
            return Err(PipelineError::Config("lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PipelineError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn point_dim(&self) -> usize {
        self.d_s + self.d_o
    }
}

// Named RNG substreams; every draw in the pipeline descends from the config
// seed through these tags.
pub const STREAM_INIT_STRUCTURE: u64 = 1;
pub const STREAM_INIT_OPCODE: u64 = 2;
pub const STREAM_INIT_LSTM: u64 = 3;
pub const STREAM_INIT_MLP: u64 = 4;
pub const STREAM_STAGE1: u64 = 5;
pub const STREAM_STAGE2: u64 = 6;
pub const STREAM_KFOLD: u64 = 7;
pub const STREAM_PROJECT: u64 = 8;

/// Trained parameters plus the node-id order they were trained against.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub node_ids: Vec<AccountId>,
    pub structure: StructureTable,
    pub opcode: OpcodeModelParams,
    pub sequence: SequenceModelParams,
    pub classifier: ClassifierParams,
}

/// Initialize every parameter table for `graph` from the config seed.
pub fn init_model(graph: &TemporalGraph, config: &TrainConfig) -> Result<ModelBundle, PipelineError> {
    config.validate()?;
    let base = Rng::new(config.seed);
    let mut vocab: Vec<String> = graph
        .accounts()
        .iter()
        .flat_map(|a| a.opcodes.iter().cloned())
        .collect();
    vocab.sort();
    vocab.dedup();

    let structure = StructureTable::init(
        graph.node_count(),
        config.d_s,
        config.use_context_table,
        &mut base.substream(STREAM_INIT_STRUCTURE),
    );
    let opcode = OpcodeModelParams::init(
        vocab,
        config.d_prime,
        config.d_o,
        config.r,
        &mut base.substream(STREAM_INIT_OPCODE),
    );
    let sequence = SequenceModelParams::init(
        config.lstm_hidden,
        config.point_dim(),
        config.dropout,
        &mut base.substream(STREAM_INIT_LSTM),
    );
    let classifier = ClassifierParams::init(
        config.lstm_hidden,
        &config.mlp_widths,
        &mut base.substream(STREAM_INIT_MLP),
    );
    Ok(ModelBundle {
        config: config.clone(),
        node_ids: graph.accounts().iter().map(|a| a.id.clone()).collect(),
        structure,
        opcode,
        sequence,
        classifier,
    })
}

/// First timestamp at which each node appears in the event stream.
fn first_active_times(graph: &TemporalGraph, events: &[(usize, usize, u64)]) -> Vec<Option<u64>> {
    let mut first = vec![None; graph.node_count()];
    for &(from, to, t) in events {
        for node in [from, to] {
            if first[node].map_or(true, |cur| t < cur) {
                first[node] = Some(t);
            }
        }
    }
    first
}

#[derive(Debug, Clone, Default)]
pub struct Stage1Report {
    pub epochs: usize,
    pub sampled_loss_per_epoch: Vec<f64>,
}

/// Stage 1: event-ordered negative-sampled SGD over the structure and
/// opcode edge losses (the ablation drops one term).
pub fn train_embeddings(
    bundle: &mut ModelBundle,
    graph: &TemporalGraph,
    events: &[TransactionEvent],
) -> Result<Stage1Report, PipelineError> {
    let config = bundle.config.clone();
    config.validate()?;
    if graph.node_count() == 0 || events.is_empty() {
        return Err(PipelineError::Config("empty graph or event stream".into()));
    }

    // Timestamp order with input order as tie-break.
    let mut schedule: Vec<(usize, usize, u64)> = Vec::with_capacity(events.len());
    for event in events {
        let from = graph.require_node(&event.from)?;
        let to = graph.require_node(&event.to)?;
        schedule.push((from, to, event.timestamp));
    }
    schedule.sort_by_key(|&(_, _, t)| t);

    // Distinct edges in first-seen order; pool_len[i] = edges visible after
    // event i, so replay samples never look ahead.
    let mut edge_order: Vec<(usize, usize)> = Vec::new();
    let mut edge_seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pool_len = Vec::with_capacity(schedule.len());
    for &(from, to, _) in &schedule {
        edge_seen.entry((from, to)).or_insert_with(|| {
            edge_order.push((from, to));
            edge_order.len() - 1
        });
        pool_len.push(edge_order.len());
    }

    let noise = NodeNoise::from_graph(graph);
    let all_nodes: Vec<usize> = (0..graph.node_count()).collect();
    let first_active = first_active_times(graph, &schedule);
    let mut rng = Rng::new(config.seed).substream(STREAM_STAGE1);
    let mut report = Stage1Report {
        epochs: config.epochs_stage1,
        sampled_loss_per_epoch: Vec::with_capacity(config.epochs_stage1),
    };

    for _epoch in 0..config.epochs_stage1 {
        let mut epoch_loss = 0.0;
        for (i, &(from, to, t)) in schedule.iter().enumerate() {
            let snapshot_filter = |z: usize| first_active[z].map_or(false, |f| f <= t);
            let allowed: Option<&dyn Fn(usize) -> bool> = if config.negatives_from_snapshot {
                Some(&snapshot_filter)
            } else {
                None
            };
            for b in 0..config.batch_size {
                let (v, x) = if b == 0 {
                    (from, to)
                } else {
                    edge_order[rng.below(pool_len[i])]
                };
                let w = graph.weight_at(v, x, t) as f64;
                if w == 0.0 {
                    continue;
                }
                if config.ablation != Ablation::OpcodeOnly {
                    let (loss, grads) = match config.stage1_sampling {
                        Stage1Sampling::NegSampled => {
                            let (loss, grads, _) = edge_loss_negsampled(
                                v,
                                x,
                                w,
                                &bundle.structure,
                                config.neg_k,
                                &noise,
                                allowed,
                                &mut rng,
                            )?;
                            (loss, grads)
                        }
                        Stage1Sampling::Exact => {
                            edge_loss_exact(v, x, w, &all_nodes, &bundle.structure)?
                        }
                    };
                    bundle.structure.apply(&grads, config.lr);
                    epoch_loss += loss;
                }
                if config.ablation != Ablation::StructureOnly {
                    let (loss, grads) = match config.stage1_sampling {
                        Stage1Sampling::NegSampled => {
                            let (loss, grads, _) = opcode_edge_loss(
                                v,
                                x,
                                w,
                                graph,
                                &bundle.opcode,
                                config.l_max,
                                config.neg_k,
                                &noise,
                                allowed,
                                &mut rng,
                            )?;
                            (loss, grads)
                        }
                        Stage1Sampling::Exact => opcode_edge_loss_exact_grads(
                            v,
                            x,
                            w,
                            &all_nodes,
                            graph,
                            &bundle.opcode,
                            config.l_max,
                        )?,
                    };
                    bundle.opcode.apply(&grads, config.lr);
                    epoch_loss += loss;
                }
            }
        }
        log::debug!("stage1 epoch {_epoch}: sampled loss {epoch_loss:.3}");
        report.sampled_loss_per_epoch.push(epoch_loss);
    }
    Ok(report)
}

/// Exact stage-1 objective over every edge of the full graph, with softmax
/// denominators enumerated over all nodes. The oracle training is measured
/// against; tractable on small graphs only.
pub fn exact_stage1_loss(
    graph: &TemporalGraph,
    bundle: &ModelBundle,
) -> Result<f64, PipelineError> {
    let candidates: Vec<usize> = (0..graph.node_count()).collect();
    let mut total = 0.0;
    for ((v, x), w) in graph.edges() {
        if bundle.config.ablation != Ablation::OpcodeOnly {
            let (loss, _) = edge_loss_exact(v, x, w as f64, &candidates, &bundle.structure)?;
            total += loss;
        }
        if bundle.config.ablation != Ablation::StructureOnly {
            total += opcode_edge_loss_exact(
                v,
                x,
                w as f64,
                &candidates,
                graph,
                &bundle.opcode,
                bundle.config.l_max,
            )?;
        }
    }
    Ok(total)
}

/// Lazily built convolution features, shared across the nodes of one
/// embedding pass (the embedding side is frozen here).
pub struct EmbeddingContext<'a> {
    graph: &'a TemporalGraph,
    bundle: &'a ModelBundle,
    cache: BTreeMap<usize, (ControlLogicMatrix, Tensor2)>,
}

fn cached_features<'b>(
    cache: &'b mut BTreeMap<usize, (ControlLogicMatrix, Tensor2)>,
    graph: &TemporalGraph,
    bundle: &ModelBundle,
    node: usize,
) -> Result<&'b (ControlLogicMatrix, Tensor2), PipelineError> {
    if !cache.contains_key(&node) {
        let clm = control_logic_matrix(
            graph.account(node),
            &bundle.opcode.lexicon,
            bundle.config.l_max,
        );
        let c = convolve_features(&clm, &bundle.opcode.bank, bundle.opcode.activation)?;
        cache.insert(node, (clm, c));
    }
    Ok(&cache[&node])
}

impl<'a> EmbeddingContext<'a> {
    pub fn new(graph: &'a TemporalGraph, bundle: &'a ModelBundle) -> Self {
        EmbeddingContext {
            graph,
            bundle,
            cache: BTreeMap::new(),
        }
    }

    fn features(&mut self, node: usize) -> Result<&(ControlLogicMatrix, Tensor2), PipelineError> {
        cached_features(&mut self.cache, self.graph, self.bundle, node)
    }

    /// Temporal-point embeddings of `v`: one `1 x (d_s + d_o)` row per
    /// formation event, the opcode part averaging the interactive
    /// embeddings of all counterparties up to and including that event.
    pub fn temporal_points(&mut self, v: usize) -> Result<Vec<Tensor2>, PipelineError> {
        let formation: Vec<usize> = self.graph.formation(v).iter().map(|&(u, _)| u).collect();
        let structure_part = self.bundle.structure.vector(v)?.clone();
        let d_o = self.bundle.config.d_o;
        let c_v = self.features(v)?.1.clone();

        let mut points = Vec::with_capacity(formation.len());
        let mut running = Tensor2::zeros(1, d_o);
        for (i, &u) in formation.iter().enumerate() {
            let c_u = &cached_features(&mut self.cache, self.graph, self.bundle, u)?.1;
            let att = mutual_attention(&c_v, c_u, &self.bundle.opcode.attention)?;
            let v_of_u = interactive_embedding(&c_v, &att.attn_u)?;
            running.add_scaled(&v_of_u, 1.0)?;
            let opcode_part = running.scale(1.0 / (i + 1) as f64);
            let mut data = Vec::with_capacity(structure_part.cols() + d_o);
            data.extend_from_slice(structure_part.row_slice(0));
            data.extend_from_slice(opcode_part.row_slice(0));
            points.push(Tensor2::from_vec(1, data.len(), data)?);
        }
        Ok(points)
    }

    /// Compressed sequence ready for the LSTM.
    pub fn compressed_sequence(&mut self, v: usize) -> Result<Vec<Tensor2>, PipelineError> {
        let points = self.temporal_points(v)?;
        let out = compress_sequence(
            &points,
            self.bundle.config.seq_len,
            self.bundle.config.point_dim(),
        )?;
        Ok(out)
    }
}

/// Opcode-side embedding of `v` over an explicit interactive account set;
/// mean of the interactive embeddings, zero vector when the set is empty.
pub fn aggregate_opcode_embedding(
    v: usize,
    interactive: &[usize],
    graph: &TemporalGraph,
    bundle: &ModelBundle,
) -> Result<Tensor2, PipelineError> {
    let mut cache = BTreeMap::new();
    let c_v = cached_features(&mut cache, graph, bundle, v)?.1.clone();
    let mut embeddings = Vec::with_capacity(interactive.len());
    for &u in interactive {
        let c_u = &cached_features(&mut cache, graph, bundle, u)?.1;
        let att = mutual_attention(&c_v, c_u, &bundle.opcode.attention)?;
        embeddings.push(interactive_embedding(&c_v, &att.attn_u)?);
    }
    Ok(aggregate_interactive(&embeddings, bundle.config.d_o))
}

/// Overall embedding of one node: temporal points, compression, LSTM final
/// hidden state (dropout inactive).
pub fn embed_node(
    v: usize,
    graph: &TemporalGraph,
    bundle: &ModelBundle,
) -> Result<Tensor2, PipelineError> {
    let mut ctx = EmbeddingContext::new(graph, bundle);
    let seq = ctx.compressed_sequence(v)?;
    let mut rng = Rng::new(0);
    let fwd = lstm_forward(&seq, &bundle.sequence, false, &mut rng)?;
    Ok(fwd.hidden)
}

#[derive(Debug, Clone, Default)]
pub struct Stage2Report {
    pub epochs: usize,
    /// Full-dataset classification loss (dropout off) after training.
    pub final_loss: f64,
}

struct Stage2Grads {
    sequence: Vec<Tensor2>,
    layers: Vec<DenseLayer>,
    out_weights: Tensor2,
    out_bias: f64,
}

impl Stage2Grads {
    fn zeros(seq: &SequenceModelParams, mlp: &ClassifierParams) -> Self {
        Stage2Grads {
            sequence: seq
                .tensors()
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
            layers: mlp
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: Tensor2::zeros(l.weights.rows(), l.weights.cols()),
                    bias: Tensor2::zeros(l.bias.rows(), l.bias.cols()),
                })
                .collect(),
            out_weights: Tensor2::zeros(1, mlp.out_weights.cols()),
            out_bias: 0.0,
        }
    }
}

/// Squared norm of the supervised-stage parameters (LSTM + MLP).
pub fn stage2_theta_sq(bundle: &ModelBundle) -> f64 {
    bundle
        .sequence
        .tensors()
        .iter()
        .map(|t| t.frobenius_sq())
        .sum::<f64>()
        + bundle.classifier.frobenius_sq()
}

/// Stage 2 on precomputed compressed sequences: minibatch SGD on the
/// logistic loss with L2 regularization, backpropagating through the MLP
/// and the LSTM. Embedding-side parameters are never touched.
pub fn train_classifier_cached(
    bundle: &mut ModelBundle,
    samples: &[(usize, Label)],
    sequences: &[Vec<Tensor2>],
    rng: &mut Rng,
) -> Result<Stage2Report, PipelineError> {
    let config = bundle.config.clone();
    let has_ponzi = samples.iter().any(|&(_, l)| l == Label::Ponzi);
    let has_normal = samples.iter().any(|&(_, l)| l == Label::Normal);
    if !has_ponzi || !has_normal {
        return Err(PipelineError::Config(
            "training set must contain both classes".into(),
        ));
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _epoch in 0..config.epochs_stage2 {
        rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let mut grads = Stage2Grads::zeros(&bundle.sequence, &bundle.classifier);
            for &sample in batch {
                let (seq_idx, label) = samples[sample];
                let seq = &sequences[seq_idx];
                let fwd = lstm_forward(seq, &bundle.sequence, true, rng)?;
                let mlp_fwd = mlp_forward(&fwd.hidden, &bundle.classifier)?;
                let d_margin = margin_gradient(mlp_fwd.margin, label);
                let mlp_grads = mlp_backward(&bundle.classifier, &mlp_fwd, d_margin);
                let seq_grads = lstm_gradients(&bundle.sequence, &fwd, &mlp_grads.input)?;
                for (acc, g) in grads.sequence.iter_mut().zip(&seq_grads.tensors) {
                    acc.add_scaled(g, 1.0)?;
                }
                for (acc, g) in grads.layers.iter_mut().zip(&mlp_grads.layers) {
                    acc.weights.add_scaled(&g.weights, 1.0)?;
                    acc.bias.add_scaled(&g.bias, 1.0)?;
                }
                grads.out_weights.add_scaled(&mlp_grads.out_weights, 1.0)?;
                grads.out_bias += mlp_grads.out_bias;
            }
            // L2 term: d(lambda ||theta||^2) = 2 lambda theta, once per batch.
            let two_lambda = 2.0 * config.lambda;
            for (param, grad) in bundle
                .sequence
                .tensors_mut()
                .into_iter()
                .zip(&mut grads.sequence)
            {
                grad.add_scaled(param, two_lambda)?;
                param.add_scaled(grad, -config.lr)?;
            }
            for (layer, grad) in bundle.classifier.layers.iter_mut().zip(&mut grads.layers) {
                grad.weights.add_scaled(&layer.weights, two_lambda)?;
                grad.bias.add_scaled(&layer.bias, two_lambda)?;
                layer.weights.add_scaled(&grad.weights, -config.lr)?;
                layer.bias.add_scaled(&grad.bias, -config.lr)?;
            }
            grads
                .out_weights
                .add_scaled(&bundle.classifier.out_weights, two_lambda)?;
            bundle
                .classifier
                .out_weights
                .add_scaled(&grads.out_weights, -config.lr)?;
            bundle.classifier.out_bias -=
                config.lr * (grads.out_bias + two_lambda * bundle.classifier.out_bias);
        }
    }

    // Report the exact objective with dropout off.
    let mut margins = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut eval_rng = Rng::new(0);
    for &(seq_idx, label) in samples {
        let fwd = lstm_forward(&sequences[seq_idx], &bundle.sequence, false, &mut eval_rng)?;
        margins.push(mlp_forward(&fwd.hidden, &bundle.classifier)?.margin);
        labels.push(label);
    }
    let final_loss = classification_loss(&margins, &labels, config.lambda, stage2_theta_sq(bundle))?;
    Ok(Stage2Report {
        epochs: config.epochs_stage2,
        final_loss,
    })
}

/// Stage 2 from scratch: compute the (frozen) compressed sequences of the
/// labeled contracts, then train the LSTM and MLP.
pub fn train_classifier(
    bundle: &mut ModelBundle,
    graph: &TemporalGraph,
    labeled: &[(usize, Label)],
) -> Result<Stage2Report, PipelineError> {
    let mut ctx = EmbeddingContext::new(graph, bundle);
    let mut sequences = Vec::with_capacity(labeled.len());
    for &(node, _) in labeled {
        sequences.push(ctx.compressed_sequence(node)?);
    }
    drop(ctx);
    let samples: Vec<(usize, Label)> = labeled
        .iter()
        .enumerate()
        .map(|(i, &(_, label))| (i, label))
        .collect();
    let mut rng = Rng::new(bundle.config.seed).substream(STREAM_STAGE2);
    train_classifier_cached(bundle, &samples, &sequences, &mut rng)
}

/// Labeled contract nodes of a graph, in node-index order.
pub fn labeled_nodes(graph: &TemporalGraph) -> Vec<(usize, Label)> {
    (0..graph.node_count())
        .filter_map(|idx| graph.account(idx).label.map(|l| (idx, l)))
        .collect()
}

/// Full pipeline: init, stage 1 over the events, stage 2 over the labels.
pub fn train_full(
    graph: &TemporalGraph,
    events: &[TransactionEvent],
    config: &TrainConfig,
) -> Result<ModelBundle, PipelineError> {
    let mut bundle = init_model(graph, config)?;
    train_embeddings(&mut bundle, graph, events)?;
    let labeled = labeled_nodes(graph);
    train_classifier(&mut bundle, graph, &labeled)?;
    Ok(bundle)
}

/// One detection row: the margin and thresholded label, or a per-account
/// failure that leaves the rest of the run intact.
#[derive(Debug, Clone)]
pub struct DetectRow {
    pub id: AccountId,
    pub outcome: Result<(f64, Label), String>,
}

/// Score accounts with a trained model; unknown ids produce error rows.
pub fn detect(ids: &[AccountId], bundle: &ModelBundle, graph: &TemporalGraph) -> Vec<DetectRow> {
    let mut ctx = EmbeddingContext::new(graph, bundle);
    let mut eval_rng = Rng::new(0);
    ids.iter()
        .map(|id| {
            let outcome = match graph.node_idx(id) {
                None => Err(format!("unknown account {id}")),
                Some(node) => ctx
                    .compressed_sequence(node)
                    .and_then(|seq| {
                        let fwd = lstm_forward(&seq, &bundle.sequence, false, &mut eval_rng)?;
                        let mlp = mlp_forward(&fwd.hidden, &bundle.classifier)?;
                        Ok((mlp.margin, crate::classifier::predict(mlp.margin, 0.0)))
                    })
                    .map_err(|e| e.to_string()),
            };
            DetectRow {
                id: id.clone(),
                outcome,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

pub const MODEL_FORMAT: &str = "dspsd-model";
pub const MODEL_VERSION: u32 = 1;

fn tensor_rows(t: &Tensor2) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

fn rows_tensor(rows: &[Vec<f64>], what: &str) -> Result<Tensor2, PipelineError> {
    Tensor2::from_rows(rows).map_err(|e| PipelineError::ModelFormat(format!("{what}: {e}")))
}

fn row_tensor(row: &[f64], what: &str) -> Result<Tensor2, PipelineError> {
    Tensor2::row(row).map_err(|e| PipelineError::ModelFormat(format!("{what}: {e}")))
}

#[derive(Serialize, Deserialize)]
struct StructureFile {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    context: Option<BTreeMap<String, Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct OpcodeFile {
    dim: usize,
    lexicon: BTreeMap<String, Vec<f64>>,
    unknown: Vec<f64>,
    filters: Vec<Vec<Vec<f64>>>,
    filter_biases: Vec<f64>,
    attention: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SequenceFile {
    hidden: usize,
    input_dim: usize,
    dropout: f64,
    w_input: Vec<Vec<f64>>,
    w_forget: Vec<Vec<f64>>,
    w_output: Vec<Vec<f64>>,
    w_cell: Vec<Vec<f64>>,
    b_input: Vec<f64>,
    b_forget: Vec<f64>,
    b_output: Vec<f64>,
    b_cell: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    layers: Vec<LayerFile>,
    output_weights: Vec<f64>,
    output_bias: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config: TrainConfig,
    node_ids: Vec<String>,
    structure: StructureFile,
    opcode: OpcodeFile,
    sequence: SequenceFile,
    classifier: ClassifierFile,
}

impl ModelBundle {
    pub fn to_json(&self) -> String {
        let named = |vectors: &[Tensor2]| -> BTreeMap<String, Vec<f64>> {
            self.node_ids
                .iter()
                .zip(vectors)
                .map(|(id, v)| (id.to_string(), v.data().to_vec()))
                .collect()
        };
        let lex = &self.opcode.lexicon;
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            node_ids: self.node_ids.iter().map(|id| id.to_string()).collect(),
            structure: StructureFile {
                dim: self.structure.dim(),
                vectors: named(self.structure.vectors()),
                context: self.structure.context_vectors().map(named),
            },
            opcode: OpcodeFile {
                dim: lex.dim(),
                lexicon: lex
                    .names()
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (n.clone(), lex.vector(i).data().to_vec()))
                    .collect(),
                unknown: lex.vector(lex.unknown_slot()).data().to_vec(),
                filters: self.opcode.bank.filters.iter().map(tensor_rows).collect(),
                filter_biases: self.opcode.bank.biases.clone(),
                attention: tensor_rows(&self.opcode.attention),
            },
            sequence: SequenceFile {
                hidden: self.sequence.hidden,
                input_dim: self.sequence.input_dim,
                dropout: self.sequence.dropout,
                w_input: tensor_rows(&self.sequence.w_input),
                w_forget: tensor_rows(&self.sequence.w_forget),
                w_output: tensor_rows(&self.sequence.w_output),
                w_cell: tensor_rows(&self.sequence.w_cell),
                b_input: self.sequence.b_input.data().to_vec(),
                b_forget: self.sequence.b_forget.data().to_vec(),
                b_output: self.sequence.b_output.data().to_vec(),
                b_cell: self.sequence.b_cell.data().to_vec(),
            },
            classifier: ClassifierFile {
                layers: self
                    .classifier
                    .layers
                    .iter()
                    .map(|l| LayerFile {
                        weights: tensor_rows(&l.weights),
                        bias: l.bias.data().to_vec(),
                    })
                    .collect(),
                output_weights: self.classifier.out_weights.data().to_vec(),
                output_bias: self.classifier.out_bias,
            },
        };
        let mut body = serde_json::to_string_pretty(&file).expect("model serializes");
        body.push('\n');
        body
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_json()).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<ModelBundle, PipelineError> {
        let body = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: ModelFile =
            serde_json::from_str(&body).map_err(|e| PipelineError::ModelFormat(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(PipelineError::ModelFormat(format!(
                "unexpected format tag `{}`",
                file.format
            )));
        }
        if file.version != MODEL_VERSION {
            return Err(PipelineError::ModelFormat(format!(
                "unsupported version {}",
                file.version
            )));
        }

        let node_ids: Vec<AccountId> = file.node_ids.iter().map(AccountId::new).collect();
        let gather = |map: &BTreeMap<String, Vec<f64>>| -> Result<Vec<Tensor2>, PipelineError> {
            node_ids
                .iter()
                .map(|id| {
                    let row = map.get(id.as_str()).ok_or_else(|| {
                        PipelineError::ModelFormat(format!("missing structure vector for {id}"))
                    })?;
                    row_tensor(row, "structure vector")
                })
                .collect()
        };
        let emb = gather(&file.structure.vectors)?;
        let ctx = file.structure.context.as_ref().map(|c| gather(c)).transpose()?;
        let structure = StructureTable::from_parts(file.structure.dim, emb, ctx);

        let mut names: Vec<String> = file.opcode.lexicon.keys().cloned().collect();
        names.sort();
        let mut vectors = Vec::with_capacity(names.len() + 1);
        for name in &names {
            vectors.push(row_tensor(&file.opcode.lexicon[name], "lexicon vector")?);
        }
        vectors.push(row_tensor(&file.opcode.unknown, "unknown vector")?);
        let lexicon =
            crate::opcode_embed::OpcodeLexicon::from_parts(file.opcode.dim, names, vectors);
        let filters = file
            .opcode
            .filters
            .iter()
            .map(|f| rows_tensor(f, "filter"))
            .collect::<Result<Vec<_>, _>>()?;
        let opcode = OpcodeModelParams {
            lexicon,
            bank: crate::opcode_embed::FilterBank {
                filters,
                biases: file.opcode.filter_biases.clone(),
            },
            attention: rows_tensor(&file.opcode.attention, "attention")?,
            activation: crate::numerics::ElemOp::Tanh,
        };

        let sequence = SequenceModelParams {
            hidden: file.sequence.hidden,
            input_dim: file.sequence.input_dim,
            w_input: rows_tensor(&file.sequence.w_input, "w_input")?,
            w_forget: rows_tensor(&file.sequence.w_forget, "w_forget")?,
            w_output: rows_tensor(&file.sequence.w_output, "w_output")?,
            w_cell: rows_tensor(&file.sequence.w_cell, "w_cell")?,
            b_input: row_tensor(&file.sequence.b_input, "b_input")?,
            b_forget: row_tensor(&file.sequence.b_forget, "b_forget")?,
            b_output: row_tensor(&file.sequence.b_output, "b_output")?,
            b_cell: row_tensor(&file.sequence.b_cell, "b_cell")?,
            dropout: file.sequence.dropout,
        };

        let classifier = ClassifierParams {
            layers: file
                .classifier
                .layers
                .iter()
                .map(|l| {
                    Ok(DenseLayer {
                        weights: rows_tensor(&l.weights, "layer weights")?,
                        bias: row_tensor(&l.bias, "layer bias")?,
                    })
                })
                .collect::<Result<Vec<_>, PipelineError>>()?,
            out_weights: row_tensor(&file.classifier.output_weights, "output weights")?,
            out_bias: file.classifier.output_bias,
        };

        Ok(ModelBundle {
            config: file.config,
            node_ids,
            structure,
            opcode,
            sequence,
            classifier,
        })
    }

    /// Check that the structure table covers every node of `graph` in the
    /// same order the model was trained with.
    pub fn check_alignment(&self, graph: &TemporalGraph) -> Result<(), PipelineError> {
        if graph.node_count() != self.node_ids.len() {
            return Err(PipelineError::ModelFormat(format!(
                "model trained on {} nodes, graph has {}",
                self.node_ids.len(),
                graph.node_count()
            )));
        }
        for (idx, id) in self.node_ids.iter().enumerate() {
            if &graph.account(idx).id != id {
                return Err(PipelineError::ModelFormat(format!(
                    "node {idx} is {} in the graph but {} in the model; \
                     detect requires the training dataset",
                    graph.account(idx).id,
                    id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, DatasetRecipe, SchemeKind, SchemeParams};
    use crate::txgraph::{build_graph, Account};

    fn small_config() -> TrainConfig {
        TrainConfig {
            d_s: 6,
            d_o: 4,
            d_prime: 5,
            r: 2,
            l_max: 10,
            lstm_hidden: 4,
            seq_len: 4,
            batch_size: 4,
            neg_k: 2,
            epochs_stage1: 2,
            epochs_stage2: 20,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(seed: u64) -> (TemporalGraph, Vec<TransactionEvent>) {
        let handover =
            generate_synthetic(SchemeKind::Handover, 5, seed, &SchemeParams::default()).unwrap();
        let normal = generate_synthetic(SchemeKind::Normal, 5, seed + 1, &SchemeParams::default())
            .unwrap();
        let mut events = handover.events;
        events.extend(normal.events);
        let mut accounts = handover.accounts;
        accounts.extend(normal.accounts);
        (build_graph(&events, &accounts), events)
    }

    #[test]
    fn default_config_validates() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::synthetic().validate().unwrap();
    }

    #[test]
    fn config_rejects_out_of_range_lr() {
        let config = TrainConfig {
            lr: 0.5,
            ..TrainConfig::default()
        };
        assert!(matches!(config.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn config_rejects_bad_mlp_widths() {
        let config = TrainConfig {
            mlp_widths: vec![10, 10, 10],
            ..TrainConfig::default()
        };
        assert!(config.validate().is_err());
        let config = TrainConfig {
            mlp_widths: vec![32, 32],
            ..TrainConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn zero_epochs_leave_parameters_at_init() {
        let (graph, events) = tiny_dataset(5);
        let config = TrainConfig {
            epochs_stage1: 0,
            ..small_config()
        };
        let init = init_model(&graph, &config).unwrap();
        let mut bundle = init.clone();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        assert_eq!(init.structure.vectors(), bundle.structure.vectors());
        assert_eq!(init.opcode, bundle.opcode);
    }

    #[test]
    fn structure_only_ablation_keeps_opcode_parameters_at_init() {
        let (graph, events) = tiny_dataset(6);
        let config = TrainConfig {
            ablation: Ablation::StructureOnly,
            epochs_stage1: 1,
            ..small_config()
        };
        let init = init_model(&graph, &config).unwrap();
        let mut bundle = init.clone();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        assert_eq!(init.opcode, bundle.opcode);
        assert_ne!(init.structure.vectors(), bundle.structure.vectors());
    }

    #[test]
    fn opcode_only_ablation_keeps_structure_at_init() {
        let (graph, events) = tiny_dataset(7);
        let config = TrainConfig {
            ablation: Ablation::OpcodeOnly,
            epochs_stage1: 1,
            ..small_config()
        };
        let init = init_model(&graph, &config).unwrap();
        let mut bundle = init.clone();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        assert_eq!(init.structure.vectors(), bundle.structure.vectors());
        assert_ne!(init.opcode, bundle.opcode);
    }

    /// 10-node graph composed of three generated scheme components; small
    /// enough for the exact softmax paths.
    pub(crate) fn ten_node_graph(seed: u64) -> (TemporalGraph, Vec<TransactionEvent>) {
        let params = SchemeParams::default();
        let mut events: Vec<TransactionEvent> = Vec::new();
        let mut accounts: Vec<Account> = Vec::new();
        let mut offset = 0u64;
        let parts = [
            (SchemeKind::Handover, 2),
            (SchemeKind::ArrayPyramid, 2),
            (SchemeKind::Waterfall, 3),
        ];
        for (i, (scheme, n)) in parts.iter().enumerate() {
            let c = generate_synthetic(*scheme, *n, seed + i as u64, &params).unwrap();
            events.extend(c.events.into_iter().map(|mut e| {
                e.timestamp += offset;
                e
            }));
            accounts.extend(c.accounts);
            offset += 50;
        }
        (build_graph(&events, &accounts), events)
    }

    /// Exact-path configuration for the 10-node loss-decrease check.
    pub(crate) fn ten_node_exact_config() -> TrainConfig {
        TrainConfig {
            d_s: 100,
            d_o: 24,
            d_prime: 64,
            r: 2,
            l_max: 12,
            lstm_hidden: 4,
            seq_len: 4,
            batch_size: 64,
            neg_k: 2,
            epochs_stage1: 20,
            lr: 0.01,
            stage1_sampling: Stage1Sampling::Exact,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage1_training_reduces_exact_loss_on_small_graph() {
        let (graph, events) = ten_node_graph(3);
        assert_eq!(graph.node_count(), 10);
        let config = ten_node_exact_config();
        let mut bundle = init_model(&graph, &config).unwrap();
        let before = exact_stage1_loss(&graph, &bundle).unwrap();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        let after = exact_stage1_loss(&graph, &bundle).unwrap();
        assert!(
            after <= 0.5 * before,
            "exact loss {before:.3} -> {after:.3}, expected at least 50% reduction"
        );
    }

    #[test]
    fn embedding_output_has_lstm_hidden_dimension() {
        let (graph, events) = tiny_dataset(8);
        let config = small_config();
        let mut bundle = init_model(&graph, &config).unwrap();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        let emb = embed_node(0, &graph, &bundle).unwrap();
        assert_eq!(emb.shape(), (1, config.lstm_hidden));
    }

    #[test]
    fn node_without_events_embeds_deterministically() {
        let accounts = vec![
            Account::contract("isolated", vec!["PUSH1".into()], Some(Label::Normal)),
            Account::eoa("a"),
            Account::eoa("b"),
        ];
        let events = vec![TransactionEvent::new("a", "b", 1, 1.0)];
        let graph = build_graph(&events, &accounts);
        let bundle = init_model(&graph, &small_config()).unwrap();
        let idx = graph.node_idx(&AccountId::new("isolated")).unwrap();
        let e1 = embed_node(idx, &graph, &bundle).unwrap();
        let e2 = embed_node(idx, &graph, &bundle).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.shape(), (1, small_config().lstm_hidden));
    }

    #[test]
    fn embedding_ignores_unrelated_nodes_given_frozen_params() {
        let (graph, events) = tiny_dataset(9);
        let bundle = init_model(&graph, &small_config()).unwrap();
        let target = 0;
        let before = embed_node(target, &graph, &bundle).unwrap();

        // Append an unrelated component; reuse the same parameters for the
        // shared nodes.
        let extra = generate_synthetic(SchemeKind::Normal, 4, 77, &SchemeParams::default()).unwrap();
        let mut all_events = events.clone();
        all_events.extend(extra.events.iter().cloned().map(|mut e| {
            e.timestamp += 100_000;
            e
        }));
        let mut all_accounts: Vec<Account> = graph.accounts().to_vec();
        all_accounts.extend(extra.accounts);
        let bigger = build_graph(&all_events, &all_accounts);
        let mut bigger_bundle = init_model(&bigger, &small_config()).unwrap();
        // Overwrite the shared prefix so frozen parameters agree.
        let mut emb = bigger_bundle.structure.vectors().to_vec();
        for (i, v) in bundle.structure.vectors().iter().enumerate() {
            emb[i] = v.clone();
        }
        bigger_bundle.structure = StructureTable::from_parts(small_config().d_s, emb, None);
        bigger_bundle.opcode = bundle.opcode.clone();
        bigger_bundle.sequence = bundle.sequence.clone();
        bigger_bundle.classifier = bundle.classifier.clone();

        let after = embed_node(target, &bigger, &bigger_bundle).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn no_lookahead_in_truncated_histories() {
        let (graph, events) = tiny_dataset(10);
        let bundle = init_model(&graph, &small_config()).unwrap();
        let v = 0;
        let formation = graph.formation(v).to_vec();
        assert!(formation.len() >= 3);
        let cut = formation[2].1;

        let mut ctx = EmbeddingContext::new(&graph, &bundle);
        let full_points = ctx.temporal_points(v).unwrap();

        // Rebuild the graph from only the events at or before the cut.
        let truncated: Vec<TransactionEvent> = events
            .iter()
            .filter(|e| e.timestamp <= cut)
            .cloned()
            .collect();
        let tgraph = build_graph(&truncated, graph.accounts());
        let tbundle = ModelBundle {
            node_ids: tgraph.accounts().iter().map(|a| a.id.clone()).collect(),
            ..bundle.clone()
        };
        let mut tctx = EmbeddingContext::new(&tgraph, &tbundle);
        let trunc_points = tctx.temporal_points(v).unwrap();

        for (i, point) in trunc_points.iter().enumerate() {
            for (a, b) in point.data().iter().zip(full_points[i].data()) {
                assert!((a - b).abs() < 1e-12, "lookahead detected at point {i}");
            }
        }
    }

    #[test]
    fn classifier_training_separates_a_toy_set() {
        // Two clearly separable constant sequences, one per class.
        let (graph, _) = tiny_dataset(11);
        let config = TrainConfig {
            epochs_stage2: 100,
            lambda: 0.0,
            dropout: 0.0,
            ..small_config()
        };
        let mut bundle = init_model(&graph, &config).unwrap();
        let dim = config.point_dim();
        let plus = vec![Tensor2::from_vec(1, dim, vec![0.8; dim]).unwrap(); config.seq_len];
        let minus = vec![Tensor2::from_vec(1, dim, vec![-0.8; dim]).unwrap(); config.seq_len];
        let sequences = vec![plus, minus];
        let samples = vec![(0, Label::Ponzi), (1, Label::Normal)];
        let mut rng = Rng::new(config.seed).substream(STREAM_STAGE2);
        let report =
            train_classifier_cached(&mut bundle, &samples, &sequences, &mut rng).unwrap();
        assert!(
            report.final_loss < std::f64::consts::LN_2,
            "loss {} after 100 epochs",
            report.final_loss
        );
    }

    #[test]
    fn huge_lambda_shrinks_weights() {
        let (graph, events) = tiny_dataset(12);
        let config = TrainConfig {
            epochs_stage2: 50,
            lambda: 1e3,
            lr: 1e-4,
            lr_bounds: (1e-4, 0.01),
            dropout: 0.0,
            ..small_config()
        };
        let mut bundle = init_model(&graph, &config).unwrap();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        let init_norm = stage2_theta_sq(&bundle);
        let labeled = labeled_nodes(&graph);
        train_classifier(&mut bundle, &graph, &labeled).unwrap();
        let trained_norm = stage2_theta_sq(&bundle);
        assert!(
            trained_norm < init_norm,
            "norm {init_norm} -> {trained_norm}"
        );
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let (graph, events) = tiny_dataset(13);
        let mut bundle = init_model(&graph, &small_config()).unwrap();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        let labeled: Vec<(usize, Label)> = labeled_nodes(&graph)
            .into_iter()
            .filter(|&(_, l)| l == Label::Ponzi)
            .collect();
        assert!(matches!(
            train_classifier(&mut bundle, &graph, &labeled),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn stage2_never_touches_embedding_parameters() {
        let (graph, events) = tiny_dataset(14);
        let mut bundle = init_model(&graph, &small_config()).unwrap();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        let structure_before = bundle.structure.clone();
        let opcode_before = bundle.opcode.clone();
        let labeled = labeled_nodes(&graph);
        train_classifier(&mut bundle, &graph, &labeled).unwrap();
        assert_eq!(structure_before.vectors(), bundle.structure.vectors());
        assert_eq!(opcode_before, bundle.opcode);
    }

    #[test]
    fn detection_is_deterministic_and_tolerates_unknown_ids() {
        let (graph, events) = tiny_dataset(15);
        let mut bundle = init_model(&graph, &small_config()).unwrap();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        let labeled = labeled_nodes(&graph);
        train_classifier(&mut bundle, &graph, &labeled).unwrap();

        let ids = vec![
            graph.account(labeled[0].0).id.clone(),
            AccountId::new("missing"),
            graph.account(labeled[1].0).id.clone(),
        ];
        let rows1 = detect(&ids, &bundle, &graph);
        let rows2 = detect(&ids, &bundle, &graph);
        assert_eq!(rows1.len(), 3);
        assert!(rows1[1].outcome.is_err());
        for (a, b) in rows1.iter().zip(&rows2) {
            match (&a.outcome, &b.outcome) {
                (Ok((m1, l1)), Ok((m2, l2))) => {
                    assert_eq!(m1, m2);
                    assert_eq!(l1, l2);
                }
                (Err(e1), Err(e2)) => assert_eq!(e1, e2),
                _ => panic!("outcomes diverged"),
            }
        }
    }

    #[test]
    fn eoa_accounts_detect_without_error() {
        let (graph, events) = tiny_dataset(16);
        let mut bundle = init_model(&graph, &small_config()).unwrap();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        let labeled = labeled_nodes(&graph);
        train_classifier(&mut bundle, &graph, &labeled).unwrap();
        let eoa_id = graph
            .accounts()
            .iter()
            .find(|a| !a.is_contract())
            .unwrap()
            .id
            .clone();
        let rows = detect(&[eoa_id], &bundle, &graph);
        assert!(rows[0].outcome.is_ok());
    }

    #[test]
    fn model_bundle_round_trips_through_json() {
        let (graph, events) = tiny_dataset(17);
        let config = TrainConfig {
            use_context_table: true,
            ..small_config()
        };
        let mut bundle = init_model(&graph, &config).unwrap();
        train_embeddings(&mut bundle, &graph, &events).unwrap();
        let labeled = labeled_nodes(&graph);
        train_classifier(&mut bundle, &graph, &labeled).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dspsd.json");
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        loaded.check_alignment(&graph).unwrap();
        assert_eq!(loaded.to_json(), bundle.to_json());
        // Loaded model scores identically.
        let ids = vec![graph.account(labeled[0].0).id.clone()];
        let a = detect(&ids, &bundle, &graph);
        let b = detect(&ids, &loaded, &graph);
        assert_eq!(a[0].outcome.as_ref().unwrap(), b[0].outcome.as_ref().unwrap());
    }

    #[test]
    fn training_is_deterministic_end_to_end() {
        let dataset = crate::dataio::generate_dataset(&DatasetRecipe::small(), 7).unwrap();
        let config = TrainConfig {
            epochs_stage2: 5,
            ..small_config()
        };
        let graph = build_graph(&dataset.events, &dataset.accounts);
        let a = train_full(&graph, &dataset.events, &config).unwrap();
        let b = train_full(&graph, &dataset.events, &config).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn aggregate_opcode_embedding_matches_pairwise_mean() {
        let (graph, _) = tiny_dataset(18);
        let bundle = init_model(&graph, &small_config()).unwrap();
        let v = 0;
        let us: Vec<usize> = graph.formation(v).iter().take(3).map(|&(u, _)| u).collect();
        let agg = aggregate_opcode_embedding(v, &us, &graph, &bundle).unwrap();
        assert_eq!(agg.shape(), (1, small_config().d_o));
        let empty = aggregate_opcode_embedding(v, &[], &graph, &bundle).unwrap();
        assert!(empty.data().iter().all(|&x| x == 0.0));
    }
}
