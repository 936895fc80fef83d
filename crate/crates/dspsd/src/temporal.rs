//! Sequence aggregation over a node's interaction history.
//!
//! Temporal-point embeddings are compressed to a fixed length (block
//! averaging for long sequences, zero padding for short ones) and fed
//! through a single-layer LSTM; the final hidden state is the node's overall
//! embedding. Backpropagation through time is hand-derived and verified by
//! the gradient checker.

use thiserror::Error;

use crate::numerics::{sigmoid, Rng, Tensor2};

#[derive(Debug, Error)]
pub enum TemporalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target length must be at least 1")]
    EmptyTarget,
}

/// Single-layer LSTM parameters. Each gate weight acts on the concatenated
/// `[h_{t-1}, x_t]` input, so every matrix is `hidden x (hidden + input)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModelParams {
    pub hidden: usize,
    pub input_dim: usize,
    pub w_input: Tensor2,
    pub w_forget: Tensor2,
    pub w_output: Tensor2,
    pub w_cell: Tensor2,
    pub b_input: Tensor2,
    pub b_forget: Tensor2,
    pub b_output: Tensor2,
    pub b_cell: Tensor2,
    /// Drop probability applied to the final hidden state during supervised
    /// training (inverted scaling); inactive at inference.
    pub dropout: f64,
}

impl SequenceModelParams {
    /// Gate weights uniform in `+-1/sqrt(hidden + input_dim)` (fan-in
    /// scaling), biases in the same range.
    pub fn init(hidden: usize, input_dim: usize, dropout: f64, rng: &mut Rng) -> Self {
        let m = hidden + input_dim;
        let scale = (1.0 / m as f64).sqrt();
        let w = |rng: &mut Rng| Tensor2::uniform(hidden, m, -scale, scale, rng);
        let b = |rng: &mut Rng| Tensor2::uniform(1, hidden, -scale, scale, rng);
        SequenceModelParams {
            hidden,
            input_dim,
            w_input: w(rng),
            w_forget: w(rng),
            w_output: w(rng),
            w_cell: w(rng),
            b_input: b(rng),
            b_forget: b(rng),
            b_output: b(rng),
            b_cell: b(rng),
            dropout,
        }
    }

    pub fn zeros(hidden: usize, input_dim: usize) -> Self {
        let m = hidden + input_dim;
        SequenceModelParams {
            hidden,
            input_dim,
            w_input: Tensor2::zeros(hidden, m),
            w_forget: Tensor2::zeros(hidden, m),
            w_output: Tensor2::zeros(hidden, m),
            w_cell: Tensor2::zeros(hidden, m),
            b_input: Tensor2::zeros(1, hidden),
            b_forget: Tensor2::zeros(1, hidden),
            b_output: Tensor2::zeros(1, hidden),
            b_cell: Tensor2::zeros(1, hidden),
            dropout: 0.0,
        }
    }

    /// Weight and bias tensors in a fixed order (for regularization and SGD).
    pub fn tensors(&self) -> [&Tensor2; 8] {
        [
            &self.w_input,
            &self.w_forget,
            &self.w_output,
            &self.w_cell,
            &self.b_input,
            &self.b_forget,
            &self.b_output,
            &self.b_cell,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2; 8] {
        [
            &mut self.w_input,
            &mut self.w_forget,
            &mut self.w_output,
            &mut self.w_cell,
            &mut self.b_input,
            &mut self.b_forget,
            &mut self.b_output,
            &mut self.b_cell,
        ]
    }
}

/// Gradients mirroring [`SequenceModelParams::tensors`] order, plus the
/// gradients w.r.t. the input sequence.
#[derive(Debug, Clone)]
pub struct SequenceGrads {
    pub tensors: Vec<Tensor2>,
    pub inputs: Vec<Tensor2>,
}

/// Compress a sequence to exactly `target_len` entries.
///
/// Longer sequences are split into `target_len` contiguous blocks whose
/// sizes differ by at most one (longer blocks first) and each block is
/// replaced by its unweighted mean; shorter sequences are zero-padded at the
/// end.
pub fn compress_sequence(
    seq: &[Tensor2],
    target_len: usize,
    dim: usize,
) -> Result<Vec<Tensor2>, TemporalError> {
    if target_len == 0 {
        return Err(TemporalError::EmptyTarget);
    }
    let n = seq.len();
    if n == target_len {
        return Ok(seq.to_vec());
    }
    if n < target_len {
        let mut out = seq.to_vec();
        out.resize(target_len, Tensor2::zeros(1, dim));
        return Ok(out);
    }
    let base = n / target_len;
    let remainder = n % target_len;
    let mut out = Vec::with_capacity(target_len);
    let mut start = 0;
    for block in 0..target_len {
        let size = base + usize::from(block < remainder);
        let mut mean = Tensor2::zeros(1, dim);
        for item in &seq[start..start + size] {
            mean.add_scaled(item, 1.0)
                .map_err(|e| TemporalError::Shape(e.to_string()))?;
        }
        out.push(mean.scale(1.0 / size as f64));
        start += size;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct StepState {
    concat: Tensor2,
    gate_in: Tensor2,
    gate_forget: Tensor2,
    gate_out: Tensor2,
    cell_candidate: Tensor2,
    cell: Tensor2,
    cell_tanh: Tensor2,
}

/// Cached forward pass: final hidden state (after optional dropout) plus the
/// per-step values backpropagation needs.
#[derive(Debug, Clone)]
pub struct LstmForward {
    pub hidden: Tensor2,
    steps: Vec<StepState>,
    dropout_scale: Option<Vec<f64>>,
}

fn gate(params: &Tensor2, bias: &Tensor2, concat: &Tensor2, squash: impl Fn(f64) -> f64) -> Tensor2 {
    let hidden = params.rows();
    let mut out = Tensor2::zeros(1, hidden);
    let z = concat.row_slice(0);
    let slot = out.row_slice_mut(0);
    for (j, v) in slot.iter_mut().enumerate() {
        let wrow = params.row_slice(j);
        let mut acc = bias.get(0, j);
        for (w, x) in wrow.iter().zip(z) {
            acc += w * x;
        }
        *v = squash(acc);
    }
    out
}

/// Run the LSTM over `seq` (row vectors of `input_dim`), starting from zero
/// hidden and cell states. With `dropout_active`, the final hidden state is
/// masked with inverted scaling using draws from `rng`.
pub fn lstm_forward(
    seq: &[Tensor2],
    params: &SequenceModelParams,
    dropout_active: bool,
    rng: &mut Rng,
) -> Result<LstmForward, TemporalError> {
    let hidden = params.hidden;
    let mut h = Tensor2::zeros(1, hidden);
    let mut cell = Tensor2::zeros(1, hidden);
    let mut steps = Vec::with_capacity(seq.len());
    for x in seq {
        if x.shape() != (1, params.input_dim) {
            return Err(TemporalError::Shape(format!(
                "input {:?}, expected (1, {})",
                x.shape(),
                params.input_dim
            )));
        }
        let mut concat_data = Vec::with_capacity(hidden + params.input_dim);
        concat_data.extend_from_slice(h.row_slice(0));
        concat_data.extend_from_slice(x.row_slice(0));
        let concat = Tensor2::from_vec(1, hidden + params.input_dim, concat_data)
            .map_err(|e| TemporalError::Shape(e.to_string()))?;

        let gate_in = gate(&params.w_input, &params.b_input, &concat, sigmoid);
        let gate_forget = gate(&params.w_forget, &params.b_forget, &concat, sigmoid);
        let gate_out = gate(&params.w_output, &params.b_output, &concat, sigmoid);
        let cell_candidate = gate(&params.w_cell, &params.b_cell, &concat, f64::tanh);

        let mut new_cell = Tensor2::zeros(1, hidden);
        for j in 0..hidden {
            new_cell.set(
                0,
                j,
                gate_forget.get(0, j) * cell.get(0, j)
                    + gate_in.get(0, j) * cell_candidate.get(0, j),
            );
        }
        let cell_tanh = new_cell.map(f64::tanh);
        let mut new_h = Tensor2::zeros(1, hidden);
        for j in 0..hidden {
            new_h.set(0, j, gate_out.get(0, j) * cell_tanh.get(0, j));
        }

        steps.push(StepState {
            concat,
            gate_in,
            gate_forget,
            gate_out,
            cell_candidate,
            cell: cell.clone(),
            cell_tanh,
        });
        cell = new_cell;
        h = new_h;
    }

    let mut dropout_scale = None;
    let mut final_hidden = h;
    if dropout_active && params.dropout > 0.0 {
        let keep = 1.0 - params.dropout;
        let scale: Vec<f64> = (0..hidden)
            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        for (j, s) in scale.iter().enumerate() {
            let v = final_hidden.get(0, j) * s;
            final_hidden.set(0, j, v);
        }
        dropout_scale = Some(scale);
    }

    Ok(LstmForward {
        hidden: final_hidden,
        steps,
        dropout_scale,
    })
}

/// Backpropagation through time given the loss gradient on the final hidden
/// state. Returns parameter gradients (in [`SequenceModelParams::tensors`]
/// order) and gradients for each input.
pub fn lstm_gradients(
    params: &SequenceModelParams,
    forward: &LstmForward,
    upstream: &Tensor2,
) -> Result<SequenceGrads, TemporalError> {
    let hidden = params.hidden;
    if upstream.shape() != (1, hidden) {
        return Err(TemporalError::Shape(format!(
            "upstream {:?}, expected (1, {hidden})",
            upstream.shape()
        )));
    }
    let m = hidden + params.input_dim;
    let mut g_w = vec![
        Tensor2::zeros(hidden, m),
        Tensor2::zeros(hidden, m),
        Tensor2::zeros(hidden, m),
        Tensor2::zeros(hidden, m),
    ];
    let mut g_b = vec![
        Tensor2::zeros(1, hidden),
        Tensor2::zeros(1, hidden),
        Tensor2::zeros(1, hidden),
        Tensor2::zeros(1, hidden),
    ];
    let mut g_inputs = vec![Tensor2::zeros(1, params.input_dim); forward.steps.len()];

    let mut d_h = upstream.clone();
    if let Some(scale) = &forward.dropout_scale {
        for (j, s) in scale.iter().enumerate() {
            let v = d_h.get(0, j) * s;
            d_h.set(0, j, v);
        }
    }
    let mut d_cell = Tensor2::zeros(1, hidden);

    for (t, step) in forward.steps.iter().enumerate().rev() {
        // h_t = o_t * tanh(S_t)
        let mut d_pre = [
            Tensor2::zeros(1, hidden), // input gate
            Tensor2::zeros(1, hidden), // forget gate
            Tensor2::zeros(1, hidden), // output gate
            Tensor2::zeros(1, hidden), // cell candidate
        ];
        let mut d_cell_prev = Tensor2::zeros(1, hidden);
        for j in 0..hidden {
            let dh = d_h.get(0, j);
            let o = step.gate_out.get(0, j);
            let ct = step.cell_tanh.get(0, j);
            let d_o = dh * ct;
            let d_cell_total = d_cell.get(0, j) + dh * o * (1.0 - ct * ct);
            let i_g = step.gate_in.get(0, j);
            let f_g = step.gate_forget.get(0, j);
            let cand = step.cell_candidate.get(0, j);
            let prev_cell = step.cell.get(0, j);
            d_pre[0].set(0, j, d_cell_total * cand * i_g * (1.0 - i_g));
            d_pre[1].set(0, j, d_cell_total * prev_cell * f_g * (1.0 - f_g));
            d_pre[2].set(0, j, d_o * o * (1.0 - o));
            d_pre[3].set(0, j, d_cell_total * i_g * (1.0 - cand * cand));
            d_cell_prev.set(0, j, d_cell_total * f_g);
        }

        let weights = [&params.w_input, &params.w_forget, &params.w_output, &params.w_cell];
        let mut d_concat = vec![0.0; m];
        for (g, ((w, gw), gb)) in d_pre
            .iter()
            .zip(weights.iter().zip(&mut g_w).zip(&mut g_b))
        {
            let (w, gw, gb) = (w, gw, gb);
            for j in 0..hidden {
                let dj = g.get(0, j);
                if dj == 0.0 {
                    continue;
                }
                *gb.row_slice_mut(0).get_mut(j).expect("in range") += dj;
                let z = step.concat.row_slice(0);
                let gw_row = gw.row_slice_mut(j);
                for (col, (&zv, gwv)) in z.iter().zip(gw_row.iter_mut()).enumerate() {
                    *gwv += dj * zv;
                    d_concat[col] += dj * w.get(j, col);
                }
            }
        }

        let mut d_h_prev = Tensor2::zeros(1, hidden);
        for j in 0..hidden {
            d_h_prev.set(0, j, d_concat[j]);
        }
        g_inputs[t]
            .row_slice_mut(0)
            .copy_from_slice(&d_concat[hidden..]);

        d_h = d_h_prev;
        d_cell = d_cell_prev;
    }

    let mut tensors = g_w;
    tensors.extend(g_b);
    Ok(SequenceGrads {
        tensors,
        inputs: g_inputs,
    })
}
