//! MLP binary classifier over the aggregated node embedding.
//!
//! Three sigmoid hidden layers feed a scalar margin; the Ponzi probability
//! is the logistic transform of that margin, which makes the two-logit
//! softmax output and the logistic loss coincide. The loss adds an L2
//! penalty over the supervised-stage parameters.

use thiserror::Error;

use crate::numerics::{sigmoid, softplus, Rng, Tensor2};
use crate::txgraph::Label;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("margin/label counts differ: {margins} vs {labels}")]
    CountMismatch { margins: usize, labels: usize },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in` weights.
    pub weights: Tensor2,
    pub bias: Tensor2,
}

/// Sigmoid MLP with a final scalar projection to the margin.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub layers: Vec<DenseLayer>,
    pub out_weights: Tensor2,
    pub out_bias: f64,
}

impl ClassifierParams {
    /// Glorot init with the x4 gain sigmoid units need to avoid crushing
    /// the signal: weights uniform in `+-4 sqrt(6 / (fan_in + fan_out))`.
    pub fn init(input_dim: usize, widths: &[usize], rng: &mut Rng) -> Self {
        let glorot = |fan_in: usize, fan_out: usize| 4.0 * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &width in widths {
            let scale = glorot(prev, width);
            layers.push(DenseLayer {
                weights: Tensor2::uniform(width, prev, -scale, scale, rng),
                bias: Tensor2::zeros(1, width),
            });
            prev = width;
        }
        let scale = glorot(prev, 1);
        ClassifierParams {
            layers,
            out_weights: Tensor2::uniform(1, prev, -scale, scale, rng),
            out_bias: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .map(|l| l.weights.cols())
            .unwrap_or_else(|| self.out_weights.cols())
    }

    /// Squared L2 norm of every weight and bias.
    pub fn frobenius_sq(&self) -> f64 {
        let mut total = self.out_weights.frobenius_sq() + self.out_bias * self.out_bias;
        for layer in &self.layers {
            total += layer.weights.frobenius_sq() + layer.bias.frobenius_sq();
        }
        total
    }
}

/// Cached activations from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpForward {
    pub margin: f64,
    /// Ponzi probability, `sigmoid(margin)` (two-logit softmax with logits
    /// `[0, margin]`).
    pub probability: f64,
    activations: Vec<Tensor2>,
}

/// Forward pass: sigmoid layers, then the scalar margin.
pub fn mlp_forward(input: &Tensor2, params: &ClassifierParams) -> Result<MlpForward, ClassifierError> {
    if input.shape() != (1, params.input_dim()) {
        return Err(ClassifierError::Shape(format!(
            "input {:?}, expected (1, {})",
            input.shape(),
            params.input_dim()
        )));
    }
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(input.clone());
    let mut current = input.clone();
    for layer in &params.layers {
        let mut next = Tensor2::zeros(1, layer.weights.rows());
        for j in 0..layer.weights.rows() {
            let wrow = layer.weights.row_slice(j);
            let mut acc = layer.bias.get(0, j);
            for (w, x) in wrow.iter().zip(current.row_slice(0)) {
                acc += w * x;
            }
            next.set(0, j, sigmoid(acc));
        }
        activations.push(next.clone());
        current = next;
    }
    let mut margin = params.out_bias;
    for (w, x) in params.out_weights.row_slice(0).iter().zip(current.row_slice(0)) {
        margin += w * x;
    }
    Ok(MlpForward {
        margin,
        probability: sigmoid(margin),
        activations,
    })
}

/// Gradients in the same layout as [`ClassifierParams`], plus the input
/// gradient for backpropagation into the LSTM.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<DenseLayer>,
    pub out_weights: Tensor2,
    pub out_bias: f64,
    pub input: Tensor2,
}

/// Backward pass given `d_margin`, the loss gradient w.r.t. the margin.
pub fn mlp_backward(
    params: &ClassifierParams,
    forward: &MlpForward,
    d_margin: f64,
) -> MlpGrads {
    let last = forward.activations.last().expect("at least the input");
    let mut g_out_w = Tensor2::zeros(1, params.out_weights.cols());
    for j in 0..params.out_weights.cols() {
        g_out_w.set(0, j, d_margin * last.get(0, j));
    }
    let mut d_act: Vec<f64> = params
        .out_weights
        .row_slice(0)
        .iter()
        .map(|&w| d_margin * w)
        .collect();

    let mut g_layers: Vec<DenseLayer> = Vec::with_capacity(params.layers.len());
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let output = &forward.activations[idx + 1];
        let input = &forward.activations[idx];
        let mut g_w = Tensor2::zeros(layer.weights.rows(), layer.weights.cols());
        let mut g_b = Tensor2::zeros(1, layer.weights.rows());
        let mut d_prev = vec![0.0; layer.weights.cols()];
        for j in 0..layer.weights.rows() {
            let y = output.get(0, j);
            let d_pre = d_act[j] * y * (1.0 - y);
            g_b.set(0, j, d_pre);
            let wrow = layer.weights.row_slice(j);
            let grow = g_w.row_slice_mut(j);
            for (col, (&x, g)) in input.row_slice(0).iter().zip(grow.iter_mut()).enumerate() {
                *g = d_pre * x;
                d_prev[col] += d_pre * wrow[col];
            }
        }
        g_layers.push(DenseLayer { weights: g_w, bias: g_b });
        d_act = d_prev;
    }
    g_layers.reverse();

    MlpGrads {
        layers: g_layers,
        out_weights: g_out_w,
        out_bias: d_margin,
        input: Tensor2::row(&d_act).expect("finite gradients"),
    }
}

/// Logistic classification loss over margins with an L2 penalty:
/// `sum_i [y ln(1 + e^{-margin}) + (1-y) ln(1 + e^{margin})] + lambda * theta_sq`.
///
/// `theta_sq` is the squared norm of the supervised-stage parameters; pass 0
/// to evaluate the data term alone.
pub fn classification_loss(
    margins: &[f64],
    labels: &[Label],
    lambda: f64,
    theta_sq: f64,
) -> Result<f64, ClassifierError> {
    if margins.len() != labels.len() {
        return Err(ClassifierError::CountMismatch {
            margins: margins.len(),
            labels: labels.len(),
        });
    }
    if lambda < 0.0 {
        return Err(ClassifierError::InvalidArg(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let mut total = lambda * theta_sq;
    for (&margin, &label) in margins.iter().zip(labels) {
        total += match label {
            Label::Ponzi => softplus(-margin),
            Label::Normal => softplus(margin),
        };
    }
    Ok(total)
}

/// Gradient of the data term w.r.t. one margin: `sigmoid(margin) - y`.
pub fn margin_gradient(margin: f64, label: Label) -> f64 {
    let y = match label {
        Label::Ponzi => 1.0,
        Label::Normal => 0.0,
    };
    sigmoid(margin) - y
}

/// Threshold decision: Ponzi iff the margin strictly exceeds `threshold`.
pub fn predict(margin: f64, threshold: f64) -> Label {
    if margin > threshold {
        Label::Ponzi
    } else {
        Label::Normal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;

    fn zero_params(input: usize, widths: &[usize]) -> ClassifierParams {
        let mut layers = Vec::new();
        let mut prev = input;
        for &w in widths {
            layers.push(DenseLayer {
                weights: Tensor2::zeros(w, prev),
                bias: Tensor2::zeros(1, w),
            });
            prev = w;
        }
        ClassifierParams {
            layers,
            out_weights: Tensor2::zeros(1, prev),
            out_bias: 0.0,
        }
    }

    #[test]
    fn zero_weights_give_half_probability() {
        let params = zero_params(4, &[3, 3, 2]);
        let input = Tensor2::row(&[0.5, -0.5, 1.0, 2.0]).unwrap();
        let fwd = mlp_forward(&input, &params).unwrap();
        // Zero weights and biases: hidden activations are 0.5 vectors, the
        // margin is 0, so P(Ponzi) = 0.5.
        for layer_out in &fwd.activations[1..] {
            assert!(layer_out.data().iter().all(|&v| v == 0.5));
        }
        assert_eq!(fwd.margin, 0.0);
        assert_eq!(fwd.probability, 0.5);
    }

    #[test]
    fn probability_saturates_with_margin() {
        assert!((sigmoid(50.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-50.0) < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(1);
        let params = ClassifierParams::init(3, &[4, 4, 2], &mut rng);
        let input = Tensor2::uniform(1, 3, -1.0, 1.0, &mut rng);
        let a = mlp_forward(&input, &params).unwrap();
        let b = mlp_forward(&input, &params).unwrap();
        assert_eq!(a.margin, b.margin);
    }

    #[test]
    fn loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        let loss = classification_loss(&[0.0], &[Label::Ponzi], 0.0, 0.0).unwrap();
        assert!((loss - ln2).abs() < 1e-12);
        let loss = classification_loss(&[0.0], &[Label::Normal], 0.0, 0.0).unwrap();
        assert!((loss - ln2).abs() < 1e-12);
        let confident = classification_loss(&[40.0, -40.0], &[Label::Ponzi, Label::Normal], 0.0, 0.0)
            .unwrap();
        assert!(confident < 1e-12);
    }

    #[test]
    fn loss_is_bounded_below_by_regularizer() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let margins: Vec<f64> = (0..4).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let labels = vec![Label::Ponzi, Label::Normal, Label::Ponzi, Label::Normal];
            let theta_sq = rng.uniform(0.0, 10.0);
            let lambda = 0.3;
            let loss = classification_loss(&margins, &labels, lambda, theta_sq).unwrap();
            assert!(loss >= lambda * theta_sq);
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        assert!(classification_loss(&[0.0], &[], 0.0, 0.0).is_err());
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(2.0, 0.0), Label::Ponzi);
        assert_eq!(predict(-1.0, 0.0), Label::Normal);
        // Tie goes to Normal: strict inequality.
        assert_eq!(predict(0.0, 0.0), Label::Normal);
    }

    #[test]
    fn positive_scaling_never_flips_decisions_at_zero_threshold() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let margin = rng.uniform(-4.0, 4.0);
            let scale = rng.uniform(0.1, 10.0);
            assert_eq!(predict(margin, 0.0), predict(margin * scale, 0.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for trial in 0..5 {
            let mut rng = Rng::new(30 + trial);
            let params = ClassifierParams::init(3, &[4, 3, 2], &mut rng);
            let input = Tensor2::uniform(1, 3, -1.0, 1.0, &mut rng);
            let label = if trial % 2 == 0 { Label::Ponzi } else { Label::Normal };
            let lambda = 0.01;

            let loss_of = |p: &ClassifierParams, x: &Tensor2| {
                let fwd = mlp_forward(x, p).unwrap();
                classification_loss(&[fwd.margin], &[label], lambda, p.frobenius_sq()).unwrap()
            };

            let fwd = mlp_forward(&input, &params).unwrap();
            let d_margin = margin_gradient(fwd.margin, label);
            let grads = mlp_backward(&params, &fwd, d_margin);

            // Layer weights (data term + 2 lambda w from the L2 penalty).
            for idx in 0..params.layers.len() {
                let mut analytic = grads.layers[idx].weights.clone();
                analytic
                    .add_scaled(&params.layers[idx].weights, 2.0 * lambda)
                    .unwrap();
                let err = check_gradient(
                    |probe| {
                        let mut p = params.clone();
                        p.layers[idx].weights = probe.clone();
                        loss_of(&p, &input)
                    },
                    &params.layers[idx].weights,
                    &analytic,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "trial {trial} layer {idx} err {err}");
            }

            // Output weights.
            let mut analytic = grads.out_weights.clone();
            analytic.add_scaled(&params.out_weights, 2.0 * lambda).unwrap();
            let err = check_gradient(
                |probe| {
                    let mut p = params.clone();
                    p.out_weights = probe.clone();
                    loss_of(&p, &input)
                },
                &params.out_weights,
                &analytic,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial} out weights err {err}");

            // Input gradient (data term only; input is not regularized).
            let err = check_gradient(
                |probe| loss_of(&params, probe),
                &input,
                &grads.input,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial} input err {err}");
        }
    }
}
