//! Structure-based node embeddings.
//!
//! Each node carries one vector; an edge `(v, x, w)` is scored by the dot
//! product of the endpoint vectors and trained to raise the softmax
//! probability of `x` among candidate nodes, weighted by the transaction
//! count `w`. An exact softmax path serves as the test oracle; training uses
//! the negative-sampling surrogate.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::numerics::{log_sigmoid, sigmoid, Rng, Tensor2};
use crate::txgraph::TemporalGraph;

#[derive(Debug, Error)]
pub enum StructureError {
    #[error("node {0} has no embedding vector")]
    MissingVector(usize),
    #[error("no valid negative sample available")]
    DegenerateNoise,
    #[error("empty candidate set")]
    EmptyCandidates,
}

/// Per-node structure vectors (each `1 x d_s`), indexed by graph node
/// handle. With `context` present, candidate-side scores use the context
/// table instead of sharing the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureTable {
    dim: usize,
    emb: Vec<Tensor2>,
    ctx: Option<Vec<Tensor2>>,
}

pub const INIT_RANGE: f64 = 0.1;

impl StructureTable {
    /// Fresh table for `nodes` vectors, entries uniform in `[-0.1, 0.1]`.
    pub fn init(nodes: usize, dim: usize, use_context: bool, rng: &mut Rng) -> Self {
        let emb = (0..nodes)
            .map(|_| Tensor2::uniform(1, dim, -INIT_RANGE, INIT_RANGE, rng))
            .collect();
        let ctx = use_context.then(|| {
            (0..nodes)
                .map(|_| Tensor2::uniform(1, dim, -INIT_RANGE, INIT_RANGE, rng))
                .collect()
        });
        StructureTable { dim, emb, ctx }
    }

    pub fn from_parts(dim: usize, emb: Vec<Tensor2>, ctx: Option<Vec<Tensor2>>) -> Self {
        StructureTable { dim, emb, ctx }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.emb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emb.is_empty()
    }

    pub fn uses_context(&self) -> bool {
        self.ctx.is_some()
    }

    pub fn vector(&self, node: usize) -> Result<&Tensor2, StructureError> {
        self.emb.get(node).ok_or(StructureError::MissingVector(node))
    }

    pub fn vectors(&self) -> &[Tensor2] {
        &self.emb
    }

    pub fn context_vectors(&self) -> Option<&[Tensor2]> {
        self.ctx.as_deref()
    }

    /// Candidate-side vector: the context vector when the context table is
    /// enabled, the embedding vector otherwise.
    pub fn candidate(&self, node: usize) -> Result<&Tensor2, StructureError> {
        match &self.ctx {
            Some(ctx) => ctx.get(node).ok_or(StructureError::MissingVector(node)),
            None => self.vector(node),
        }
    }

    fn score(&self, candidate: usize, query: usize) -> Result<f64, StructureError> {
        let c = self.candidate(candidate)?;
        let q = self.vector(query)?;
        c.dot(q).map_err(|_| StructureError::MissingVector(candidate))
    }

    /// Apply accumulated gradients with one SGD step each.
    pub fn apply(&mut self, grads: &StructureGrads, lr: f64) {
        for (&node, g) in &grads.emb {
            self.emb[node]
                .add_scaled(g, -lr)
                .expect("gradient shape matches table");
        }
        if let Some(ctx) = &mut self.ctx {
            for (&node, g) in &grads.ctx {
                ctx[node]
                    .add_scaled(g, -lr)
                    .expect("gradient shape matches table");
            }
        }
    }
}

/// Gradients for the vectors touched by one loss evaluation, keyed by node
/// handle. `ctx` stays empty unless the context table is enabled.
#[derive(Debug, Clone, Default)]
pub struct StructureGrads {
    pub emb: BTreeMap<usize, Tensor2>,
    pub ctx: BTreeMap<usize, Tensor2>,
}

impl StructureGrads {
    fn add_emb(&mut self, node: usize, delta: &Tensor2, factor: f64) {
        let slot = self
            .emb
            .entry(node)
            .or_insert_with(|| Tensor2::zeros(1, delta.cols()));
        slot.add_scaled(delta, factor).expect("uniform dims");
    }

    fn add_candidate(&mut self, table: &StructureTable, node: usize, delta: &Tensor2, factor: f64) {
        let map = if table.uses_context() { &mut self.ctx } else { &mut self.emb };
        let slot = map
            .entry(node)
            .or_insert_with(|| Tensor2::zeros(1, delta.cols()));
        slot.add_scaled(delta, factor).expect("uniform dims");
    }
}

/// Softmax probability of `x` generated by `v` over the candidate set,
/// computed with max-subtraction.
pub fn conditional_prob(
    v: usize,
    x: usize,
    candidates: &[usize],
    table: &StructureTable,
) -> Result<f64, StructureError> {
    if candidates.is_empty() {
        return Err(StructureError::EmptyCandidates);
    }
    let mut scores = Vec::with_capacity(candidates.len());
    let mut target = None;
    for &z in candidates {
        let s = table.score(z, v)?;
        if z == x {
            target = Some(s);
        }
        scores.push(s);
    }
    let target = target.ok_or(StructureError::MissingVector(x))?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok((target - max).exp() / denom)
}

/// Exact weighted softmax edge loss `-w log p(x|v)` with analytic gradients
/// for every touched vector.
pub fn edge_loss_exact(
    v: usize,
    x: usize,
    w: f64,
    candidates: &[usize],
    table: &StructureTable,
) -> Result<(f64, StructureGrads), StructureError> {
    if candidates.is_empty() {
        return Err(StructureError::EmptyCandidates);
    }
    let query = table.vector(v)?.clone();
    let mut scores = Vec::with_capacity(candidates.len());
    let mut target_score = None;
    for &z in candidates {
        let s = table.score(z, v)?;
        if z == x {
            target_score = Some(s);
        }
        scores.push(s);
    }
    let target_score = target_score.ok_or(StructureError::MissingVector(x))?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp_sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let log_denom = max + exp_sum.ln();
    let loss = -w * (target_score - log_denom);

    let mut grads = StructureGrads::default();
    // d(-w s_x): candidate side of x gets -w v, query side gets -w x_cand.
    grads.add_candidate(table, x, &query, -w);
    grads.add_emb(v, table.candidate(x)?, -w);
    // d(w log sum): every candidate z contributes p_z.
    for (&z, s) in candidates.iter().zip(&scores) {
        let p = (s - max).exp() / exp_sum;
        grads.add_candidate(table, z, &query, w * p);
        grads.add_emb(v, table.candidate(z)?, w * p);
    }
    Ok((loss, grads))
}

/// Unigram noise distribution over nodes proportional to (weighted total
/// degree)^0.75, the convention negative sampling inherits from word2vec.
#[derive(Debug, Clone)]
pub struct NodeNoise {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

pub const NOISE_POWER: f64 = 0.75;

impl NodeNoise {
    pub fn from_graph(g: &TemporalGraph) -> Self {
        let weights: Vec<f64> = (0..g.node_count())
            .map(|v| (g.total_degree(v) as f64).powf(NOISE_POWER))
            .collect();
        NodeNoise::from_weights(weights)
    }

    pub fn from_weights(weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = if total > 0.0 {
            weights.iter().map(|w| w / total).collect()
        } else {
            weights.clone()
        };
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        NodeNoise { probs, cumulative }
    }

    pub fn prob(&self, node: usize) -> f64 {
        self.probs.get(node).copied().unwrap_or(0.0)
    }

    fn draw(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform01() * self.cumulative.last().copied().unwrap_or(0.0);
        self.cumulative.partition_point(|&c| c <= u).min(self.probs.len() - 1)
    }

    /// Draw one node, never `exclude`, optionally restricted to `allowed`.
    pub fn sample(
        &self,
        exclude: usize,
        allowed: Option<&dyn Fn(usize) -> bool>,
        rng: &mut Rng,
    ) -> Result<usize, StructureError> {
        let viable = self
            .probs
            .iter()
            .enumerate()
            .any(|(i, &p)| p > 0.0 && i != exclude && allowed.map_or(true, |f| f(i)));
        if !viable {
            return Err(StructureError::DegenerateNoise);
        }
        // Rejection sampling implements conditioning on the viable set.
        loop {
            let z = self.draw(rng);
            if z != exclude && allowed.map_or(true, |f| f(z)) {
                return Ok(z);
            }
        }
    }
}

/// Negative-sampling surrogate of the edge loss with explicitly provided
/// negatives; the sampling wrapper and the test oracle both call this.
pub fn edge_loss_with_negatives(
    v: usize,
    x: usize,
    w: f64,
    negatives: &[usize],
    table: &StructureTable,
) -> Result<(f64, StructureGrads), StructureError> {
    let query = table.vector(v)?.clone();
    let mut grads = StructureGrads::default();

    let pos_score = table.score(x, v)?;
    let mut loss = -w * log_sigmoid(pos_score);
    // d/ds of -w log sigma(s) is -w sigma(-s).
    let pos_coeff = -w * sigmoid(-pos_score);
    grads.add_candidate(table, x, &query, pos_coeff);
    grads.add_emb(v, table.candidate(x)?, pos_coeff);

    for &z in negatives {
        let s = table.score(z, v)?;
        loss += -w * log_sigmoid(-s);
        // d/ds of -w log sigma(-s) is w sigma(s).
        let coeff = w * sigmoid(s);
        grads.add_candidate(table, z, &query, coeff);
        grads.add_emb(v, table.candidate(z)?, coeff);
    }
    Ok((loss, grads))
}

/// Negative-sampled edge loss; draws `k` negatives (never `x`) from `noise`.
/// Returns the drawn negatives so callers can replay the evaluation.
pub fn edge_loss_negsampled(
    v: usize,
    x: usize,
    w: f64,
    table: &StructureTable,
    k: usize,
    noise: &NodeNoise,
    allowed: Option<&dyn Fn(usize) -> bool>,
    rng: &mut Rng,
) -> Result<(f64, StructureGrads, Vec<usize>), StructureError> {
    let mut negatives = Vec::with_capacity(k);
    for _ in 0..k {
        negatives.push(noise.sample(x, allowed, rng)?);
    }
    let (loss, grads) = edge_loss_with_negatives(v, x, w, &negatives, table)?;
    Ok((loss, grads, negatives))
}

/// Sum of exact edge losses over every edge of the graph, with candidates =
/// all nodes. The oracle the training loop is measured against.
pub fn total_exact_loss(g: &TemporalGraph, table: &StructureTable) -> Result<f64, StructureError> {
    let candidates: Vec<usize> = (0..g.node_count()).collect();
    let mut total = 0.0;
    for ((v, x), w) in g.edges() {
        let (loss, _) = edge_loss_exact(v, x, w as f64, &candidates, table)?;
        total += loss;
    }
    Ok(total)
}
