use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataio::ProbabilityMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Shape of a shallow classifier: linear-softmax, or one hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkLayout {
    pub input_dim: usize,
    pub hidden_dim: Option<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl NetworkLayout {
    /// Hidden width of the two-layer policy network.
    pub const DEFAULT_HIDDEN: usize = 6;

    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        NetworkLayout {
            input_dim,
            hidden_dim: None,
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn two_layer(input_dim: usize, output_dim: usize) -> Self {
        Self::with_hidden(input_dim, Some(Self::DEFAULT_HIDDEN), output_dim)
    }

    pub fn with_hidden(input_dim: usize, hidden_dim: Option<usize>, output_dim: usize) -> Self {
        NetworkLayout {
            input_dim,
            hidden_dim,
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dim == Some(0) {
            return Err(Error::Config(format!("layout dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(rows, cols)` of each weight matrix, input layer first.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        match self.hidden_dim {
            None => vec![(self.output_dim, self.input_dim)],
            Some(h) => vec![(h, self.input_dim), (self.output_dim, h)],
        }
    }

    pub fn n_params(&self) -> usize {
        self.weight_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// Borrowed view of one affine layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

/// Shallow feed-forward classifier with a softmax output.
///
/// Parameters live in one flat vector: for each layer, the row-major weight
/// matrix followed by its bias. Gradients use the same ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layout: NetworkLayout,
    params: Vec<f64>,
    init_seed: u64,
}

/// Common surface of models trained by [`crate::nn::train`].
pub trait Differentiable {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn n_classes(&self) -> usize;
    /// Mean cross-entropy over the batch.
    fn loss(&self, inputs: &Matrix, labels: &[usize]) -> Result<f64>;
    /// Loss plus its gradient with respect to [`Differentiable::params`].
    fn loss_and_grad(&self, inputs: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)>;
    fn predict_proba(&self, inputs: &Matrix) -> Result<ProbabilityMatrix>;

    fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        Ok(self.predict_proba(inputs)?.argmax_rows())
    }
}

struct Activations {
    /// Pre-activation of the hidden layer, if any.
    hidden_pre: Option<Matrix>,
    hidden: Option<Matrix>,
    logits: Matrix,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layout: NetworkLayout, seed: u64) -> Result<Self> {
        layout.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = Vec::with_capacity(layout.n_params());
        for (rows, cols) in layout.weight_shapes() {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            params.extend((0..rows * cols).map(|_| limit * (2.0 * rng.random::<f64>() - 1.0)));
            params.extend(std::iter::repeat_n(0.0, rows));
        }
        Ok(Network {
            layout,
            params,
            init_seed: seed,
        })
    }

    pub fn from_params(layout: NetworkLayout, params: Vec<f64>, init_seed: u64) -> Result<Self> {
        layout.validate()?;
        if params.len() != layout.n_params() {
            return Err(Error::LengthMismatch {
                expected: layout.n_params(),
                actual: params.len(),
            });
        }
        Ok(Network {
            layout,
            params,
            init_seed,
        })
    }

    pub fn layout(&self) -> &NetworkLayout {
        &self.layout
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn layers(&self) -> Vec<LayerView<'_>> {
        let mut offset = 0;
        self.layout
            .weight_shapes()
            .into_iter()
            .map(|(rows, cols)| {
                let w = &self.params[offset..offset + rows * cols];
                let b = &self.params[offset + rows * cols..offset + rows * cols + rows];
                offset += rows * cols + rows;
                LayerView {
                    rows,
                    cols,
                    weights: w,
                    bias: b,
                }
            })
            .collect()
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.layout.input_dim {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.layout.input_dim,
                inputs.cols()
            )));
        }
        if !inputs.all_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    fn check_labels(&self, inputs: &Matrix, labels: &[usize]) -> Result<()> {
        if labels.len() != inputs.rows() {
            return Err(Error::LengthMismatch {
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&index) = labels.iter().find(|&&y| y >= self.layout.output_dim) {
            return Err(Error::ClassOutOfRange {
                index,
                n_classes: self.layout.output_dim,
            });
        }
        Ok(())
    }

    fn activations(&self, inputs: &Matrix) -> Activations {
        let layers = self.layers();
        match layers.as_slice() {
            [out] => Activations {
                hidden_pre: None,
                hidden: None,
                logits: affine(inputs, out),
            },
            [first, out] => {
                let pre = affine(inputs, first);
                let mut hidden = pre.clone();
                hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                let logits = affine(&hidden, out);
                Activations {
                    hidden_pre: Some(pre),
                    hidden: Some(hidden),
                    logits,
                }
            }
            _ => unreachable!("layouts have one or two layers"),
        }
    }

    /// Pre-softmax scores.
    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        Ok(self.activations(inputs).logits)
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<ProbabilityMatrix> {
        let mut logits = self.logits(inputs)?;
        for i in 0..logits.rows() {
            softmax_in_place(logits.row_mut(i));
        }
        Ok(ProbabilityMatrix::from_normalized(logits))
    }

    /// Loss, parameter gradient and, on request, gradient with respect to the inputs.
    pub(crate) fn backprop(
        &self,
        inputs: &Matrix,
        labels: &[usize],
        want_input_grad: bool,
    ) -> Result<(f64, Vec<f64>, Option<Matrix>)> {
        self.check_inputs(inputs)?;
        self.check_labels(inputs, labels)?;
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::Empty("batch".into()));
        }
        let scale = 1.0 / n as f64;
        let acts = self.activations(inputs);

        // dL/dlogits = (softmax - onehot) / n
        let mut delta = acts.logits;
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = delta.row_mut(i);
            loss += log_sum_exp(row) - row[y];
            softmax_in_place(row);
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        loss *= scale;

        let layers = self.layers();
        let mut grads = vec![0.0; self.params.len()];
        let input_grad = match (&acts.hidden, &acts.hidden_pre) {
            (None, _) => {
                accumulate_layer_grad(&mut grads, 0, &delta, inputs);
                want_input_grad.then(|| propagate(&delta, &layers[0]))
            }
            (Some(hidden), Some(pre)) => {
                let first = &layers[0];
                let out_offset = first.rows * first.cols + first.rows;
                accumulate_layer_grad(&mut grads, out_offset, &delta, hidden);
                let mut dhidden = propagate(&delta, &layers[1]);
                for (d, &z) in dhidden.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate_layer_grad(&mut grads, 0, &dhidden, inputs);
                want_input_grad.then(|| propagate(&dhidden, first))
            }
            _ => unreachable!(),
        };
        Ok((loss, grads, input_grad))
    }
}

impl Differentiable for Network {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_classes(&self) -> usize {
        self.layout.output_dim
    }

    fn loss(&self, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        self.check_inputs(inputs)?;
        self.check_labels(inputs, labels)?;
        if labels.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let logits = self.activations(inputs).logits;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| log_sum_exp(logits.row(i)) - logits.get(i, y))
            .sum();
        Ok(total / labels.len() as f64)
    }

    fn loss_and_grad(&self, inputs: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (loss, grads, _) = self.backprop(inputs, labels, false)?;
        Ok((loss, grads))
    }

    fn predict_proba(&self, inputs: &Matrix) -> Result<ProbabilityMatrix> {
        self.forward(inputs)
    }
}

/// `inputs * W^T + b`.
fn affine(inputs: &Matrix, layer: &LayerView<'_>) -> Matrix {
    let mut out = Matrix::zeros(inputs.rows(), layer.rows);
    for i in 0..inputs.rows() {
        let x = inputs.row(i);
        let o = out.row_mut(i);
        for (r, slot) in o.iter_mut().enumerate() {
            let w = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
            *slot = layer.bias[r] + dot(w, x);
        }
    }
    out
}

/// `delta * W`: gradient flowing back to the layer input.
fn propagate(delta: &Matrix, layer: &LayerView<'_>) -> Matrix {
    let mut out = Matrix::zeros(delta.rows(), layer.cols);
    for i in 0..delta.rows() {
        let d = delta.row(i);
        let o = out.row_mut(i);
        for (r, &dr) in d.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            let w = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
            for (slot, &wv) in o.iter_mut().zip(w) {
                *slot += dr * wv;
            }
        }
    }
    out
}

fn accumulate_layer_grad(grads: &mut [f64], offset: usize, delta: &Matrix, inputs: &Matrix) {
    let rows = delta.cols();
    let cols = inputs.cols();
    let (gw, rest) = grads[offset..].split_at_mut(rows * cols);
    let gb = &mut rest[..rows];
    for i in 0..delta.rows() {
        let d = delta.row(i);
        let x = inputs.row(i);
        for (r, &dr) in d.iter().enumerate() {
            gb[r] += dr;
            for (g, &xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *g += dr * xv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax with the row maximum subtracted first.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    values.iter_mut().for_each(|v| *v /= sum);
}
