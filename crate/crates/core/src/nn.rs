//! Multilayer perceptron with softmax cross-entropy, backpropagation and
//! plain minibatch SGD.
//!
//! Weights are stored `in_dim × out_dim`, so a layer computes `x·W + b` on a
//! batch `x` of row vectors. A layer's weight is either a full matrix or a
//! [`LoraLinear`] (frozen base plus adapter); in the latter case only the
//! adapter factors and the bias receive gradients.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};
use crate::lora::{AdapterGrad, LoraLinear};

/// Layer widths of the MNIST/FMNIST MLP: 784 → 200 → 200 → 10.
pub const MNIST_MLP_DIMS: [usize; 4] = [784, 200, 200, 10];

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Output layer: the layer emits logits, softmax is folded into the loss.
    Softmax,
}

#[derive(Debug, Clone)]
pub enum LayerWeight {
    Full(Matrix),
    Lora(LoraLinear),
}

impl LayerWeight {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerWeight::Full(w) => w.shape(),
            LayerWeight::Lora(l) => l.shape(),
        }
    }

    pub fn effective(&self) -> Matrix {
        match self {
            LayerWeight::Full(w) => w.clone(),
            LayerWeight::Lora(l) => l.effective_weight(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: LayerWeight,
    pub bias: Matrix,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape().0
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape().1
    }
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
}

impl MlpModel {
    /// Checks that shapes chain, biases are `1 × out_dim`, and only the last
    /// layer is the softmax output.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("MlpModel::new"));
        }
        let last = layers.len() - 1;
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.shape() != (1, layer.out_dim()) {
                return Err(Error::shape("MlpModel bias", layer.weight.shape(), layer.bias.shape()));
            }
            let is_output = layer.activation == Activation::Softmax;
            if is_output != (k == last) {
                return Err(Error::Defect(format!(
                    "layer {k}: only the final layer may be the softmax output"
                )));
            }
            if k > 0 && layers[k - 1].out_dim() != layer.in_dim() {
                return Err(Error::shape(
                    "MlpModel chain",
                    layers[k - 1].weight.shape(),
                    layer.weight.shape(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Full-weight model with He-normal weights (std `sqrt(2/fan_in)`) and
    /// zero biases. `dims` lists every width including input and output.
    pub fn he_normal(dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        let weights = he_normal_weights(dims, rng)?;
        Self::from_weights(weights.into_iter().map(LayerWeight::Full).collect())
    }

    /// ReLU hidden layers, softmax output, zero biases.
    pub fn from_weights(weights: Vec<LayerWeight>) -> Result<Self> {
        let last = weights.len().saturating_sub(1);
        let layers = weights
            .into_iter()
            .enumerate()
            .map(|(k, weight)| DenseLayer {
                bias: Matrix::zeros(1, weight.shape().1),
                activation: if k == last {
                    Activation::Softmax
                } else {
                    Activation::Relu
                },
                weight,
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<DenseLayer> {
        self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Same function with every adapted layer folded into a full weight.
    pub fn merged(&self) -> MlpModel {
        MlpModel {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: LayerWeight::Full(l.weight.effective()),
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

/// He-normal weight matrices for the given widths.
pub fn he_normal_weights(dims: &[usize], rng: &mut SeededRng) -> Result<Vec<Matrix>> {
    if dims.len() < 2 {
        return Err(Error::Empty("he_normal_weights"));
    }
    Ok(dims
        .windows(2)
        .map(|w| rng.normal_matrix(w[0], w[1], 0.0, (2.0 / w[0] as f64).sqrt()))
        .collect())
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    pre_activations: Vec<Matrix>,
    /// Post-activation outputs; the last entry equals the logits.
    activations: Vec<Matrix>,
    /// `x·B` for adapted layers.
    projections: Vec<Option<Matrix>>,
}

impl ForwardCache {
    pub fn depth(&self) -> usize {
        self.pre_activations.len()
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre_activations
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.activations
    }

    fn layer_input(&self, k: usize) -> &Matrix {
        if k == 0 {
            &self.input
        } else {
            &self.activations[k - 1]
        }
    }
}

pub fn forward(model: &MlpModel, batch_x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if batch_x.cols() != model.input_dim() {
        return Err(Error::shape(
            "forward input",
            batch_x.shape(),
            model.layers[0].weight.shape(),
        ));
    }
    let depth = model.layers.len();
    let mut pre_activations = Vec::with_capacity(depth);
    let mut activations: Vec<Matrix> = Vec::with_capacity(depth);
    let mut projections = Vec::with_capacity(depth);

    for (k, layer) in model.layers.iter().enumerate() {
        let x = if k == 0 { batch_x } else { &activations[k - 1] };
        let (z, projection) = match &layer.weight {
            LayerWeight::Full(w) => (x.matmul(w)?, None),
            LayerWeight::Lora(l) => {
                let (z, p) = l.forward(x)?;
                (z, Some(p))
            }
        };
        let z = z.add_row_broadcast(&layer.bias)?;
        let out = match layer.activation {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Softmax => z.clone(),
        };
        pre_activations.push(z);
        activations.push(out);
        projections.push(projection);
    }
    let logits = activations[depth - 1].clone();
    Ok((
        logits,
        ForwardCache {
            input: batch_x.clone(),
            pre_activations,
            activations,
            projections,
        },
    ))
}

/// Row-wise softmax, stabilised by subtracting each row's max.
pub fn softmax(logits: &Matrix) -> Matrix {
    let cols = logits.cols();
    let mut data = Vec::with_capacity(logits.rows() * cols);
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / sum));
    }
    Matrix::new(logits.rows(), cols, data).expect("same shape as logits")
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("labels", logits.shape(), (labels.len(), 1)));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.cols(),
        });
    }
    Ok(())
}

/// Sum over rows of `logsumexp(row) − row[label]`.
fn cross_entropy_sum(logits: &Matrix, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            lse - row[label]
        })
        .sum()
}

/// Mean cross-entropy and its gradient `(softmax − onehot) / batch`.
pub fn loss_and_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let batch = labels.len() as f64;
    let loss = cross_entropy_sum(logits, labels) / batch;
    let probs = softmax(logits);
    let cols = logits.cols();
    let mut grad = probs.into_data();
    for (i, &label) in labels.iter().enumerate() {
        grad[i * cols + label] -= 1.0;
    }
    for g in &mut grad {
        *g /= batch;
    }
    Ok((loss, Matrix::new(logits.rows(), cols, grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightGrad {
    Full(Matrix),
    Lora(AdapterGrad),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: WeightGrad,
    pub bias: Matrix,
}

/// Per-layer gradients, shaped like the model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

pub fn backward(model: &MlpModel, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
    let depth = model.layers.len();
    if cache.depth() != depth {
        return Err(Error::Defect(format!(
            "cache depth {} does not match model depth {depth}",
            cache.depth()
        )));
    }
    if dlogits.shape() != cache.activations[depth - 1].shape() {
        return Err(Error::shape(
            "backward dlogits",
            cache.activations[depth - 1].shape(),
            dlogits.shape(),
        ));
    }

    let mut grads = Vec::with_capacity(depth);
    let mut upstream = dlogits.clone();
    for k in (0..depth).rev() {
        let layer = &model.layers[k];
        let delta = match layer.activation {
            Activation::Softmax => upstream,
            Activation::Relu => cache.pre_activations[k]
                .zip_map(&upstream, |z, g| if z > 0.0 { g } else { 0.0 })?,
        };
        let x = cache.layer_input(k);
        let want_input = k > 0;
        let (weight_grad, d_x) = match (&layer.weight, &cache.projections[k]) {
            (LayerWeight::Full(w), None) => {
                let d_x = if want_input {
                    Some(delta.matmul_t(w)?)
                } else {
                    None
                };
                (WeightGrad::Full(x.t_matmul(&delta)?), d_x)
            }
            (LayerWeight::Lora(l), Some(projection)) => {
                let (g, d_x) = l.backward(x, projection, &delta, want_input)?;
                (WeightGrad::Lora(g), d_x)
            }
            _ => {
                return Err(Error::Defect(format!(
                    "layer {k}: cache was produced by a different model"
                )))
            }
        };
        grads.push(LayerGrad {
            weight: weight_grad,
            bias: delta.sum_rows(),
        });
        if let Some(d_x) = d_x {
            upstream = d_x;
        } else {
            break;
        }
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// `p ← p − eta·∇p` for every trainable parameter.
pub fn sgd_step(model: &mut MlpModel, grads: &Gradients, eta: f64) -> Result<()> {
    if grads.layers.len() != model.layers.len() {
        return Err(Error::Defect(format!(
            "{} gradient layers for a {}-layer model",
            grads.layers.len(),
            model.layers.len()
        )));
    }
    for (layer, grad) in model.layers.iter_mut().zip(&grads.layers) {
        match (&mut layer.weight, &grad.weight) {
            (LayerWeight::Full(w), WeightGrad::Full(g)) => w.add_scaled(-eta, g)?,
            (LayerWeight::Lora(l), WeightGrad::Lora(g)) => l.step(g, eta)?,
            _ => return Err(Error::Defect("gradient kind does not match layer kind".into())),
        }
        layer.bias.add_scaled(-eta, &grad.bias)?;
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

const EVAL_CHUNK: usize = 2000;

/// Accuracy and mean cross-entropy of `model` over a labelled set.
pub fn evaluate(model: &MlpModel, test_x: &Matrix, test_y: &[usize]) -> Result<Evaluation> {
    if test_y.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    if test_x.rows() != test_y.len() {
        return Err(Error::CountMismatch {
            images: test_x.rows(),
            labels: test_y.len(),
        });
    }
    let merged = model.merged();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..test_y.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = test_x.gather_rows(chunk)?;
        let labels = &test_y[chunk[0]..chunk[0] + chunk.len()];
        let (logits, _) = forward(&merged, &x)?;
        check_labels(&logits, labels)?;
        loss_sum += cross_entropy_sum(&logits, labels);
        correct += labels
            .iter()
            .enumerate()
            .filter(|&(i, &label)| argmax(logits.row(i)) == label)
            .count();
    }
    let n = test_y.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss_sum / n,
    })
}
