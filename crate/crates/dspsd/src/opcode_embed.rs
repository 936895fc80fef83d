//! Opcode-based node embeddings.
//!
//! A contract's opcode mnemonics are looked up in a trainable lexicon and
//! stacked into a control-logic matrix, a 1-D convolution bank turns that
//! matrix into per-window feature maps, and mutual attention between the two
//! endpoints of an edge produces interactive account-aware embeddings. The
//! edge loss scores the dot product of the two interactive embeddings,
//! trained with negative sampling (an exact softmax path exists for small
//! graphs and the tests).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::numerics::{log_sigmoid, sigmoid, ElemOp, Rng, Tensor2};
use crate::structure_embed::{NodeNoise, StructureError};
use crate::txgraph::{Account, TemporalGraph};

#[derive(Debug, Error)]
pub enum OpcodeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("window width {r} exceeds matrix length {l_max}")]
    WindowTooWide { r: usize, l_max: usize },
    #[error(transparent)]
    Sampling(#[from] StructureError),
}

pub const INIT_RANGE: f64 = 0.1;

/// Trainable vector per opcode mnemonic, plus one shared unknown-token
/// vector at the last slot.
#[derive(Debug, Clone, PartialEq)]
pub struct OpcodeLexicon {
    dim: usize,
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    /// `names.len() + 1` rows; the final row is the unknown-token vector.
    vectors: Vec<Tensor2>,
}

impl OpcodeLexicon {
    /// Build from a vocabulary (deduplicated, sorted) with uniform init.
    pub fn init(vocab: impl IntoIterator<Item = String>, dim: usize, rng: &mut Rng) -> Self {
        let mut names: Vec<String> = vocab.into_iter().collect();
        names.sort();
        names.dedup();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let vectors = (0..names.len() + 1)
            .map(|_| Tensor2::uniform(1, dim, -INIT_RANGE, INIT_RANGE, rng))
            .collect();
        OpcodeLexicon {
            dim,
            names,
            index,
            vectors,
        }
    }

    pub fn from_parts(dim: usize, names: Vec<String>, vectors: Vec<Tensor2>) -> Self {
        debug_assert_eq!(vectors.len(), names.len() + 1);
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        OpcodeLexicon {
            dim,
            names,
            index,
            vectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vectors(&self) -> &[Tensor2] {
        &self.vectors
    }

    pub fn unknown_slot(&self) -> usize {
        self.names.len()
    }

    /// Slot for a mnemonic; unseen tokens share the unknown slot.
    pub fn slot(&self, mnemonic: &str) -> usize {
        self.index
            .get(mnemonic)
            .copied()
            .unwrap_or_else(|| self.unknown_slot())
    }

    pub fn vector(&self, slot: usize) -> &Tensor2 {
        &self.vectors[slot]
    }

    fn vector_mut(&mut self, slot: usize) -> &mut Tensor2 {
        &mut self.vectors[slot]
    }
}

/// Stacked lexicon rows for one account, zero-padded to `l_max` rows.
/// `slots[i]` records which lexicon entry produced row `i`; EOAs have no
/// slots and an all-zero matrix.
#[derive(Debug, Clone)]
pub struct ControlLogicMatrix {
    pub x: Tensor2,
    pub slots: Vec<usize>,
}

/// Look up and stack the opcode vectors of `acct`, truncating at `l_max`.
pub fn control_logic_matrix(
    acct: &Account,
    lex: &OpcodeLexicon,
    l_max: usize,
) -> ControlLogicMatrix {
    let mut x = Tensor2::zeros(l_max, lex.dim());
    let mut slots = Vec::new();
    for (row, mnemonic) in acct.opcodes.iter().take(l_max).enumerate() {
        let slot = lex.slot(mnemonic);
        x.row_slice_mut(row).copy_from_slice(lex.vector(slot).data());
        slots.push(slot);
    }
    ControlLogicMatrix { x, slots }
}

/// Convolution filter bank: `d_o` filters of shape `r x d'` plus one bias
/// per filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub filters: Vec<Tensor2>,
    pub biases: Vec<f64>,
}

impl FilterBank {
    /// Glorot-scaled filters, widened by the reciprocal of the lexicon's
    /// standard deviation so pre-activations start near unit variance
    /// despite the narrow lexicon range.
    pub fn init(d_o: usize, r: usize, d_prime: usize, rng: &mut Rng) -> Self {
        let lexicon_std = INIT_RANGE / 3f64.sqrt();
        let scale = (6.0 / (r * d_prime + d_o) as f64).sqrt() / lexicon_std;
        let filters = (0..d_o)
            .map(|_| Tensor2::uniform(r, d_prime, -scale, scale, rng))
            .collect();
        FilterBank {
            filters,
            biases: vec![0.0; d_o],
        }
    }

    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn width(&self) -> usize {
        self.filters.first().map_or(0, |f| f.rows())
    }
}

/// Square attentive matrix (`d_o x d_o`) used by mutual attention.
pub type AttentiveMatrix = Tensor2;

/// Slide every filter over the control-logic matrix.
///
/// `C[j, i] = f(sum(F_j * X[i..i+r]) + b_j)` for each window start `i`;
/// the output has one row (feature map) per filter and `l = L - r + 1`
/// columns. Zero rows beyond the opcode sequence contribute nothing, so only
/// windows overlapping real rows are accumulated.
pub fn convolve_features(
    clm: &ControlLogicMatrix,
    bank: &FilterBank,
    activation: ElemOp,
) -> Result<Tensor2, OpcodeError> {
    let l_max = clm.x.rows();
    let r = bank.width();
    if r == 0 || l_max < r {
        return Err(OpcodeError::WindowTooWide { r, l_max });
    }
    let l = l_max - r + 1;
    let d_prime = clm.x.cols();
    let filled = clm.slots.len();
    let mut c = Tensor2::zeros(bank.n_filters(), l);
    for (j, filter) in bank.filters.iter().enumerate() {
        if filter.shape() != (r, d_prime) {
            return Err(OpcodeError::Shape(format!(
                "filter {j} is {:?}, expected {:?}",
                filter.shape(),
                (r, d_prime)
            )));
        }
        let bias = bank.biases[j];
        let row = c.row_slice_mut(j);
        for v in row.iter_mut() {
            *v = activation.apply(bias);
        }
        for i in 0..l.min(filled) {
            let mut acc = bias;
            for a in 0..r.min(filled - i) {
                let xr = clm.x.row_slice(i + a);
                let fr = filter.row_slice(a);
                for (xv, fv) in xr.iter().zip(fr) {
                    acc += xv * fv;
                }
            }
            row[i] = activation.apply(acc);
        }
    }
    Ok(c)
}

/// Gradients flowing out of one convolution backward pass.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub filters: Vec<Tensor2>,
    pub biases: Vec<f64>,
    /// Gradient per filled row of the control-logic matrix.
    pub x_rows: Vec<Vec<f64>>,
}

/// Backward pass through [`convolve_features`] given `d_c`, the loss
/// gradient w.r.t. the feature maps.
pub fn convolve_backward(
    clm: &ControlLogicMatrix,
    bank: &FilterBank,
    c: &Tensor2,
    d_c: &Tensor2,
    activation: ElemOp,
) -> ConvGrads {
    let r = bank.width();
    let l = c.cols();
    let d_prime = clm.x.cols();
    let filled = clm.slots.len();
    let mut grads = ConvGrads {
        filters: bank.filters.iter().map(|f| Tensor2::zeros(f.rows(), f.cols())).collect(),
        biases: vec![0.0; bank.n_filters()],
        x_rows: vec![vec![0.0; d_prime]; filled],
    };
    for j in 0..bank.n_filters() {
        let filter = &bank.filters[j];
        for i in 0..l {
            let up = d_c.get(j, i);
            if up == 0.0 {
                continue;
            }
            let d_pre = up * activation.derivative_from_output(c.get(j, i));
            grads.biases[j] += d_pre;
            if i >= filled {
                continue;
            }
            for a in 0..r.min(filled - i) {
                let xr = clm.x.row_slice(i + a);
                let fr = filter.row_slice(a);
                let gf = grads.filters[j].row_slice_mut(a);
                for col in 0..d_prime {
                    gf[col] += d_pre * xr[col];
                }
                let gx = &mut grads.x_rows[i + a];
                for col in 0..d_prime {
                    gx[col] += d_pre * fr[col];
                }
            }
        }
    }
    grads
}

/// Mutual attention between two feature-map matrices.
///
/// `D = tanh(C_v^T A C_u)`; row-wise maxima pool attention for `v`,
/// column-wise maxima for `u`, and a softmax turns each pooled vector into a
/// distribution over the `l` windows.
#[derive(Debug, Clone)]
pub struct MutualAttention {
    /// Pairwise correlation scores, in (-1, 1).
    pub d: Tensor2,
    /// Attention over `C_v`'s windows (length `l`, sums to 1).
    pub attn_v: Vec<f64>,
    /// Attention over `C_u`'s windows.
    pub attn_u: Vec<f64>,
    row_argmax: Vec<usize>,
    col_argmax: Vec<usize>,
    /// Cached `A @ C_u`, reused by the backward pass.
    a_c_u: Tensor2,
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

pub fn mutual_attention(
    c_v: &Tensor2,
    c_u: &Tensor2,
    a: &AttentiveMatrix,
) -> Result<MutualAttention, OpcodeError> {
    if c_v.shape() != c_u.shape() {
        return Err(OpcodeError::Shape(format!(
            "feature maps {:?} vs {:?}",
            c_v.shape(),
            c_u.shape()
        )));
    }
    if a.shape() != (c_v.rows(), c_v.rows()) {
        return Err(OpcodeError::Shape(format!(
            "attentive matrix {:?} does not match d_o {}",
            a.shape(),
            c_v.rows()
        )));
    }
    let l = c_v.cols();
    let a_c_u = crate::numerics::matmul(a, c_u).expect("checked shapes");
    // M[m, n] = sum_alpha C_v[alpha, m] * (A C_u)[alpha, n], then D = tanh(M).
    let mut d = Tensor2::zeros(l, l);
    for alpha in 0..c_v.rows() {
        let cv_row = c_v.row_slice(alpha);
        let ac_row = a_c_u.row_slice(alpha);
        for m in 0..l {
            let coeff = cv_row[m];
            if coeff == 0.0 {
                continue;
            }
            let drow = d.row_slice_mut(m);
            for n in 0..l {
                drow[n] += coeff * ac_row[n];
            }
        }
    }
    d = d.map(f64::tanh);

    let mut raw_v = vec![f64::NEG_INFINITY; l];
    let mut raw_u = vec![f64::NEG_INFINITY; l];
    let mut row_argmax = vec![0usize; l];
    let mut col_argmax = vec![0usize; l];
    for m in 0..l {
        let drow = d.row_slice(m);
        for n in 0..l {
            if drow[n] > raw_v[m] {
                raw_v[m] = drow[n];
                row_argmax[m] = n;
            }
            if drow[n] > raw_u[n] {
                raw_u[n] = drow[n];
                col_argmax[n] = m;
            }
        }
    }
    Ok(MutualAttention {
        attn_v: softmax(&raw_v),
        attn_u: softmax(&raw_u),
        d,
        row_argmax,
        col_argmax,
        a_c_u,
    })
}

/// Interactive account-aware embedding: the attention-weighted combination
/// of feature-map columns, `C a` as a `1 x d_o` row.
pub fn interactive_embedding(c: &Tensor2, attn: &[f64]) -> Result<Tensor2, OpcodeError> {
    if attn.len() != c.cols() {
        return Err(OpcodeError::Shape(format!(
            "attention length {} vs {} windows",
            attn.len(),
            c.cols()
        )));
    }
    let mut out = Tensor2::zeros(1, c.rows());
    let slot = out.row_slice_mut(0);
    for (j, v) in slot.iter_mut().enumerate() {
        let row = c.row_slice(j);
        *v = row.iter().zip(attn).map(|(&cv, &av)| cv * av).sum();
    }
    Ok(out)
}

/// Mean of the interactive embeddings over a node's interactive account set;
/// an empty set yields the zero vector (an account with no prior events).
pub fn aggregate_interactive(embeddings: &[Tensor2], d_o: usize) -> Tensor2 {
    if embeddings.is_empty() {
        return Tensor2::zeros(1, d_o);
    }
    let mut sum = Tensor2::zeros(1, embeddings[0].cols());
    for e in embeddings {
        sum.add_scaled(e, 1.0).expect("uniform dims");
    }
    sum.scale(1.0 / embeddings.len() as f64)
}

/// Everything the opcode side trains: lexicon, filter bank, attentive matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OpcodeModelParams {
    pub lexicon: OpcodeLexicon,
    pub bank: FilterBank,
    pub attention: AttentiveMatrix,
    pub activation: ElemOp,
}

impl OpcodeModelParams {
    pub fn init(
        vocab: impl IntoIterator<Item = String>,
        d_prime: usize,
        d_o: usize,
        r: usize,
        rng: &mut Rng,
    ) -> Self {
        OpcodeModelParams {
            lexicon: OpcodeLexicon::init(vocab, d_prime, rng),
            bank: FilterBank::init(d_o, r, d_prime, rng),
            attention: Tensor2::uniform(d_o, d_o, -INIT_RANGE, INIT_RANGE, rng),
            activation: ElemOp::Tanh,
        }
    }

    pub fn d_o(&self) -> usize {
        self.bank.n_filters()
    }

    /// Apply accumulated gradients with one SGD step each.
    pub fn apply(&mut self, grads: &OpcodeGrads, lr: f64) {
        for (g, f) in grads.filters.iter().zip(&mut self.bank.filters) {
            f.add_scaled(g, -lr).expect("filter shapes match");
        }
        for (g, b) in grads.biases.iter().zip(&mut self.bank.biases) {
            *b -= lr * g;
        }
        self.attention
            .add_scaled(&grads.attention, -lr)
            .expect("attention shape matches");
        for (&slot, g) in &grads.lexicon {
            self.lexicon
                .vector_mut(slot)
                .add_scaled(g, -lr)
                .expect("lexicon dims match");
        }
    }
}

/// Gradients for one opcode-loss evaluation.
#[derive(Debug, Clone)]
pub struct OpcodeGrads {
    pub filters: Vec<Tensor2>,
    pub biases: Vec<f64>,
    pub attention: Tensor2,
    /// Lexicon gradients keyed by slot.
    pub lexicon: BTreeMap<usize, Tensor2>,
}

impl OpcodeGrads {
    fn zeros(params: &OpcodeModelParams) -> Self {
        OpcodeGrads {
            filters: params
                .bank
                .filters
                .iter()
                .map(|f| Tensor2::zeros(f.rows(), f.cols()))
                .collect(),
            biases: vec![0.0; params.bank.n_filters()],
            attention: Tensor2::zeros(params.attention.rows(), params.attention.cols()),
            lexicon: BTreeMap::new(),
        }
    }
}

/// Forward state of one attention pair `(v, u)`: the interactive embeddings
/// and their dot-product score.
struct PairForward {
    att: MutualAttention,
    v_emb: Tensor2,
    u_emb: Tensor2,
    score: f64,
}

fn pair_forward(c_v: &Tensor2, c_u: &Tensor2, a: &AttentiveMatrix) -> Result<PairForward, OpcodeError> {
    let att = mutual_attention(c_v, c_u, a)?;
    let v_emb = interactive_embedding(c_v, &att.attn_u)?;
    let u_emb = interactive_embedding(c_u, &att.attn_v)?;
    let score = u_emb.dot(&v_emb).expect("both 1 x d_o");
    Ok(PairForward {
        att,
        v_emb,
        u_emb,
        score,
    })
}

fn softmax_backward(attn: &[f64], d_attn: &[f64]) -> Vec<f64> {
    let inner: f64 = attn.iter().zip(d_attn).map(|(&a, &d)| a * d).sum();
    attn.iter()
        .zip(d_attn)
        .map(|(&a, &d)| a * (d - inner))
        .collect()
}

/// Backward pass for one pair: accumulates `d_c_v`, `d_c_u`, `d_a` given
/// the loss gradient w.r.t. the pair score.
fn pair_backward(
    c_v: &Tensor2,
    c_u: &Tensor2,
    a: &AttentiveMatrix,
    fwd: &PairForward,
    d_score: f64,
    d_c_v: &mut Tensor2,
    d_c_u: &mut Tensor2,
    d_a: &mut Tensor2,
) {
    let l = c_v.cols();
    let d_o = c_v.rows();

    // score = u_emb . v_emb
    let d_v_emb: Vec<f64> = fwd.u_emb.data().iter().map(|&q| d_score * q).collect();
    let d_u_emb: Vec<f64> = fwd.v_emb.data().iter().map(|&p| d_score * p).collect();

    // v_emb = C_v attn_u: direct path into C_v plus attention path.
    let mut d_attn_u = vec![0.0; l];
    for j in 0..d_o {
        let cv_row = c_v.row_slice(j);
        let dcv_row = d_c_v.row_slice_mut(j);
        let dj = d_v_emb[j];
        for i in 0..l {
            dcv_row[i] += dj * fwd.att.attn_u[i];
            d_attn_u[i] += dj * cv_row[i];
        }
    }
    let mut d_attn_v = vec![0.0; l];
    for j in 0..d_o {
        let cu_row = c_u.row_slice(j);
        let dcu_row = d_c_u.row_slice_mut(j);
        let dj = d_u_emb[j];
        for i in 0..l {
            dcu_row[i] += dj * fwd.att.attn_v[i];
            d_attn_v[i] += dj * cu_row[i];
        }
    }

    let d_raw_v = softmax_backward(&fwd.att.attn_v, &d_attn_v);
    let d_raw_u = softmax_backward(&fwd.att.attn_u, &d_attn_u);

    // Unpool the maxima into sparse gradients on M = atanh(D).
    let mut d_m_entries: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * l);
    for m in 0..l {
        let n = fwd.att.row_argmax[m];
        let d_val = fwd.att.d.get(m, n);
        d_m_entries.push((m, n, d_raw_v[m] * (1.0 - d_val * d_val)));
    }
    for n in 0..l {
        let m = fwd.att.col_argmax[n];
        let d_val = fwd.att.d.get(m, n);
        d_m_entries.push((m, n, d_raw_u[n] * (1.0 - d_val * d_val)));
    }

    // M = C_v^T A C_u, so with the sparse dM:
    //   dC_v[:, m] += val * (A C_u)[:, n]
    //   dC_u[:, n] += val * (A^T C_v)[:, m]
    //   dA += val * C_v[:, m] outer C_u[:, n]
    let at_c_v = crate::numerics::matmul(&a.transpose(), c_v).expect("checked shapes");
    for &(m, n, val) in &d_m_entries {
        if val == 0.0 {
            continue;
        }
        for alpha in 0..d_o {
            d_c_v.row_slice_mut(alpha)[m] += val * fwd.att.a_c_u.get(alpha, n);
            d_c_u.row_slice_mut(alpha)[n] += val * at_c_v.get(alpha, m);
        }
        for alpha in 0..d_o {
            let cv_am = c_v.get(alpha, m);
            if cv_am == 0.0 {
                continue;
            }
            let da_row = d_a.row_slice_mut(alpha);
            for beta in 0..d_o {
                da_row[beta] += val * cv_am * c_u.get(beta, n);
            }
        }
    }
}

/// Feature maps for a set of accounts, keyed by node handle.
pub struct FeatureCache {
    pub matrices: BTreeMap<usize, (ControlLogicMatrix, Tensor2)>,
}

impl FeatureCache {
    pub fn build(
        nodes: impl IntoIterator<Item = usize>,
        graph: &TemporalGraph,
        params: &OpcodeModelParams,
        l_max: usize,
    ) -> Result<Self, OpcodeError> {
        let mut matrices = BTreeMap::new();
        for node in nodes {
            if matrices.contains_key(&node) {
                continue;
            }
            let clm = control_logic_matrix(graph.account(node), &params.lexicon, l_max);
            let c = convolve_features(&clm, &params.bank, params.activation)?;
            matrices.insert(node, (clm, c));
        }
        Ok(FeatureCache { matrices })
    }

    pub fn features(&self, node: usize) -> &Tensor2 {
        &self.matrices[&node].1
    }
}

/// Negative-sampling opcode edge loss with explicitly provided negatives.
///
/// `loss = -w [log sigma(u(v) . v(u)) + sum_z log sigma(-z(v) . v(z))]` with
/// analytic gradients through the feature maps, the attentive matrix, the
/// filter bank, and the lexicon.
pub fn opcode_edge_loss_with_negatives(
    v: usize,
    u: usize,
    w: f64,
    negatives: &[usize],
    graph: &TemporalGraph,
    params: &OpcodeModelParams,
    l_max: usize,
) -> Result<(f64, OpcodeGrads), OpcodeError> {
    let nodes: Vec<usize> = std::iter::once(v)
        .chain(std::iter::once(u))
        .chain(negatives.iter().copied())
        .collect();
    let cache = FeatureCache::build(nodes, graph, params, l_max)?;

    let mut d_c: BTreeMap<usize, Tensor2> = BTreeMap::new();
    let c_shape = cache.features(v).shape();
    let ensure = |node: usize, map: &mut BTreeMap<usize, Tensor2>| {
        map.entry(node)
            .or_insert_with(|| Tensor2::zeros(c_shape.0, c_shape.1));
    };

    let mut grads = OpcodeGrads::zeros(params);
    let mut loss = 0.0;

    // Positive pair.
    {
        let c_v = cache.features(v);
        let c_u = cache.features(u);
        let fwd = pair_forward(c_v, c_u, &params.attention)?;
        loss += -w * log_sigmoid(fwd.score);
        let d_score = -w * sigmoid(-fwd.score);
        ensure(v, &mut d_c);
        ensure(u, &mut d_c);
        if v == u {
            let mut self_grad = d_c.remove(&v).expect("ensured");
            let mut dup = self_grad.clone();
            pair_backward(
                c_v,
                c_u,
                &params.attention,
                &fwd,
                d_score,
                &mut self_grad,
                &mut dup,
                &mut grads.attention,
            );
            self_grad.add_scaled(&dup, 1.0).expect("same shape");
            d_c.insert(v, self_grad);
        } else {
            let mut dv = d_c.remove(&v).expect("ensured");
            let mut du = d_c.remove(&u).expect("ensured");
            pair_backward(
                c_v,
                c_u,
                &params.attention,
                &fwd,
                d_score,
                &mut dv,
                &mut du,
                &mut grads.attention,
            );
            d_c.insert(v, dv);
            d_c.insert(u, du);
        }
    }

    // Negative pairs.
    for &z in negatives {
        let c_v = cache.features(v);
        let c_z = cache.features(z);
        let fwd = pair_forward(c_v, c_z, &params.attention)?;
        loss += -w * log_sigmoid(-fwd.score);
        let d_score = w * sigmoid(fwd.score);
        ensure(v, &mut d_c);
        ensure(z, &mut d_c);
        if v == z {
            let mut self_grad = d_c.remove(&v).expect("ensured");
            let mut dup = self_grad.clone();
            pair_backward(
                c_v,
                c_z,
                &params.attention,
                &fwd,
                d_score,
                &mut self_grad,
                &mut dup,
                &mut grads.attention,
            );
            self_grad.add_scaled(&dup, 1.0).expect("same shape");
            d_c.insert(v, self_grad);
        } else {
            let mut dv = d_c.remove(&v).expect("ensured");
            let mut dz = d_c.remove(&z).expect("ensured");
            pair_backward(
                c_v,
                c_z,
                &params.attention,
                &fwd,
                d_score,
                &mut dv,
                &mut dz,
                &mut grads.attention,
            );
            d_c.insert(v, dv);
            d_c.insert(z, dz);
        }
    }

    // Convolution and lexicon backward per touched account.
    for (node, d_c_node) in d_c {
        let (clm, c) = &cache.matrices[&node];
        let conv = convolve_backward(clm, &params.bank, c, &d_c_node, params.activation);
        for (g, f) in conv.filters.iter().zip(&mut grads.filters) {
            f.add_scaled(g, 1.0).expect("filter shapes match");
        }
        for (g, b) in conv.biases.iter().zip(&mut grads.biases) {
            *b += g;
        }
        for (row, slot) in clm.slots.iter().enumerate() {
            let gx = Tensor2::row(&conv.x_rows[row]).expect("finite gradients");
            grads
                .lexicon
                .entry(*slot)
                .or_insert_with(|| Tensor2::zeros(1, params.lexicon.dim()))
                .add_scaled(&gx, 1.0)
                .expect("lexicon dims match");
        }
    }

    Ok((loss, grads))
}

/// Sampling wrapper over [`opcode_edge_loss_with_negatives`]; returns the
/// drawn negatives so the evaluation can be replayed.
#[allow(clippy::too_many_arguments)]
pub fn opcode_edge_loss(
    v: usize,
    u: usize,
    w: f64,
    graph: &TemporalGraph,
    params: &OpcodeModelParams,
    l_max: usize,
    k: usize,
    noise: &NodeNoise,
    allowed: Option<&dyn Fn(usize) -> bool>,
    rng: &mut Rng,
) -> Result<(f64, OpcodeGrads, Vec<usize>), OpcodeError> {
    let mut negatives = Vec::with_capacity(k);
    for _ in 0..k {
        negatives.push(noise.sample(u, allowed, rng)?);
    }
    let (loss, grads) = opcode_edge_loss_with_negatives(v, u, w, &negatives, graph, params, l_max)?;
    Ok((loss, grads, negatives))
}

/// Exact softmax probability `p(u(v) | v(u))` with the denominator
/// enumerated over `candidates` (brute force, for small graphs and tests).
pub fn opcode_conditional_exact(
    v: usize,
    u: usize,
    candidates: &[usize],
    graph: &TemporalGraph,
    params: &OpcodeModelParams,
    l_max: usize,
) -> Result<f64, OpcodeError> {
    let mut nodes = candidates.to_vec();
    nodes.push(v);
    nodes.push(u);
    let cache = FeatureCache::build(nodes, graph, params, l_max)?;
    let c_v = cache.features(v);
    let mut scores = Vec::with_capacity(candidates.len());
    let mut target = None;
    for &z in candidates {
        let fwd = pair_forward(c_v, cache.features(z), &params.attention)?;
        if z == u {
            target = Some(fwd.score);
        }
        scores.push(fwd.score);
    }
    let target = target.ok_or_else(|| OpcodeError::Shape("u not in candidate set".into()))?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok((target - max).exp() / denom)
}

/// Exact opcode edge loss `-w log p(u(v)|v(u))` over `candidates`.
pub fn opcode_edge_loss_exact(
    v: usize,
    u: usize,
    w: f64,
    candidates: &[usize],
    graph: &TemporalGraph,
    params: &OpcodeModelParams,
    l_max: usize,
) -> Result<f64, OpcodeError> {
    let p = opcode_conditional_exact(v, u, candidates, graph, params, l_max)?;
    Ok(-w * p.ln())
}

/// Exact edge loss with analytic gradients: the full-softmax counterpart of
/// [`opcode_edge_loss_with_negatives`], `d loss / d s_z = w (p_z - [z = u])`.
pub fn opcode_edge_loss_exact_grads(
    v: usize,
    u: usize,
    w: f64,
    candidates: &[usize],
    graph: &TemporalGraph,
    params: &OpcodeModelParams,
    l_max: usize,
) -> Result<(f64, OpcodeGrads), OpcodeError> {
    let nodes: Vec<usize> = std::iter::once(v).chain(candidates.iter().copied()).collect();
    let cache = FeatureCache::build(nodes, graph, params, l_max)?;
    let c_v = cache.features(v).clone();

    let mut forwards = Vec::with_capacity(candidates.len());
    let mut target_score = None;
    for &z in candidates {
        let fwd = pair_forward(&c_v, cache.features(z), &params.attention)?;
        if z == u {
            target_score = Some(fwd.score);
        }
        forwards.push(fwd);
    }
    let target_score =
        target_score.ok_or_else(|| OpcodeError::Shape("u not in candidate set".into()))?;
    let max = forwards
        .iter()
        .map(|f| f.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let exp_sum: f64 = forwards.iter().map(|f| (f.score - max).exp()).sum();
    let loss = -w * (target_score - max - exp_sum.ln());

    let mut grads = OpcodeGrads::zeros(params);
    let c_shape = c_v.shape();
    let mut d_c: BTreeMap<usize, Tensor2> = BTreeMap::new();
    for (&z, fwd) in candidates.iter().zip(&forwards) {
        let p_z = (fwd.score - max).exp() / exp_sum;
        let d_score = w * (p_z - f64::from(z == u));
        if d_score == 0.0 {
            continue;
        }
        let c_z = cache.features(z);
        if z == v {
            let mut dv = d_c
                .remove(&v)
                .unwrap_or_else(|| Tensor2::zeros(c_shape.0, c_shape.1));
            let mut dup = Tensor2::zeros(c_shape.0, c_shape.1);
            pair_backward(&c_v, c_z, &params.attention, fwd, d_score, &mut dv, &mut dup, &mut grads.attention);
            dv.add_scaled(&dup, 1.0).expect("same shape");
            d_c.insert(v, dv);
        } else {
            let mut dv = d_c
                .remove(&v)
                .unwrap_or_else(|| Tensor2::zeros(c_shape.0, c_shape.1));
            let mut dz = d_c
                .remove(&z)
                .unwrap_or_else(|| Tensor2::zeros(c_shape.0, c_shape.1));
            pair_backward(&c_v, c_z, &params.attention, fwd, d_score, &mut dv, &mut dz, &mut grads.attention);
            d_c.insert(v, dv);
            d_c.insert(z, dz);
        }
    }

    for (node, d_c_node) in d_c {
        let (clm, c) = &cache.matrices[&node];
        let conv = convolve_backward(clm, &params.bank, c, &d_c_node, params.activation);
        for (g, f) in conv.filters.iter().zip(&mut grads.filters) {
            f.add_scaled(g, 1.0).expect("filter shapes match");
        }
        for (g, b) in conv.biases.iter().zip(&mut grads.biases) {
            *b += g;
        }
        for (row, slot) in clm.slots.iter().enumerate() {
            let gx = Tensor2::row(&conv.x_rows[row]).expect("finite gradients");
            grads
                .lexicon
                .entry(*slot)
                .or_insert_with(|| Tensor2::zeros(1, params.lexicon.dim()))
                .add_scaled(&gx, 1.0)
                .expect("lexicon dims match");
        }
    }
    Ok((loss, grads))
}
