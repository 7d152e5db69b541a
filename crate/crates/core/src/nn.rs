//! Fixed-topology multilayer perceptron used by every training algorithm.
//!
//! Parameters live in one flat `f64` vector so that federated deltas, clipping
//! and noise can treat the model as a single point in parameter space. Each
//! layer occupies a contiguous block: the `in × out` weight matrix in row-major
//! order followed by the `out` biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of classes in the intrusion-detection label space.
pub const NUM_CLASSES: usize = 9;

/// Input width after ingestion drops the identifier column.
pub const INPUT_WIDTH: usize = 79;

/// Default Adagrad stability constant added under the square root.
pub const DEFAULT_ADAGRAD_STABILITY: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid layer shapes {0:?}: need at least two positive widths")]
    InvalidShapes(Vec<usize>),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter layouts differ")]
    LayoutMismatch,
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Ordered layer widths: input, hidden..., output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShapes(Vec<usize>);

impl LayerShapes {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(NnError::InvalidShapes(dims));
        }
        Ok(Self(dims))
    }

    /// The 79-79-128-9 intrusion classifier.
    pub fn paper_default() -> Self {
        Self(vec![INPUT_WIDTH, 79, 128, NUM_CLASSES])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn input_width(&self) -> usize {
        self.0[0]
    }

    pub fn output_width(&self) -> usize {
        *self.0.last().expect("validated non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.0.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Per-layer block descriptors in storage order.
    pub fn layers(&self) -> Vec<LayerBlock> {
        let mut offset = 0;
        self.0
            .windows(2)
            .map(|w| {
                let block = LayerBlock {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                block
            })
            .collect()
    }
}

/// Location of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerBlock {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerBlock {
    fn weights<'a>(&self, values: &'a [f64]) -> &'a [f64] {
        &values[self.weight_offset..self.bias_offset]
    }

    fn biases<'a>(&self, values: &'a [f64]) -> &'a [f64] {
        &values[self.bias_offset..self.bias_offset + self.fan_out]
    }
}

/// Dense row-major matrix of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NnError::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NnError::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copies the selected rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(NnError::DimensionMismatch {
                expected: self.cols,
                actual: row.len(),
            });
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }
}

/// Flat model parameters with their layer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: LayerShapes,
}

impl ParamVector {
    pub fn zeros(shapes: &LayerShapes) -> Self {
        Self {
            values: vec![0.0; shapes.param_count()],
            shapes: shapes.clone(),
        }
    }

    pub fn from_values(shapes: &LayerShapes, values: Vec<f64>) -> Result<Self> {
        if values.len() != shapes.param_count() {
            return Err(NnError::DimensionMismatch {
                expected: shapes.param_count(),
                actual: values.len(),
            });
        }
        Ok(Self {
            values,
            shapes: shapes.clone(),
        })
    }

    pub fn shapes(&self) -> &LayerShapes {
        &self.shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_layout(&self, other: &[f64]) -> Result<()> {
        if self.values.len() != other.len() {
            return Err(NnError::LayoutMismatch);
        }
        Ok(())
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &ParamVector, scale: f64) -> Result<ParamVector> {
        if self.shapes != other.shapes {
            return Err(NnError::LayoutMismatch);
        }
        let mut out = self.clone();
        out.add_scaled_in_place(&other.values, scale)?;
        Ok(out)
    }

    pub fn add_scaled_in_place(&mut self, other: &[f64], scale: f64) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(other) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// `self - other`.
    pub fn difference(&self, other: &ParamVector) -> Result<ParamVector> {
        self.add_scaled(other, -1.0)
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Euclidean norm of a flat slice.
pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Gradient with the same flat layout as a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Labeled rows fed to one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(NnError::DimensionMismatch {
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn init_params(shapes: &LayerShapes, seed: u64) -> ParamVector {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(shapes);
    for block in shapes.layers() {
        let limit = (6.0 / (block.fan_in + block.fan_out) as f64).sqrt();
        for w in &mut params.values[block.weight_offset..block.bias_offset] {
            *w = rng.random_range(-limit..limit);
        }
    }
    params
}

struct Activations {
    // Post-activation outputs per layer, starting with the input itself.
    layers: Vec<Matrix>,
}

fn dense(input: &Matrix, block: &LayerBlock, values: &[f64]) -> Matrix {
    let weights = block.weights(values);
    let biases = block.biases(values);
    let mut out = Matrix::zeros(input.rows(), block.fan_out);
    for r in 0..input.rows() {
        let x = input.row(r);
        let z = out.row_mut(r);
        z.copy_from_slice(biases);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let w_row = &weights[i * block.fan_out..(i + 1) * block.fan_out];
            for (zo, &w) in z.iter_mut().zip(w_row) {
                *zo += xi * w;
            }
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn run_forward(params: &ParamVector, features: &Matrix) -> Result<(Activations, Matrix)> {
    let shapes = params.shapes();
    if features.cols() != shapes.input_width() && features.rows() > 0 {
        return Err(NnError::DimensionMismatch {
            expected: shapes.input_width(),
            actual: features.cols(),
        });
    }
    let blocks = shapes.layers();
    let mut layers = Vec::with_capacity(blocks.len());
    let mut current = features.clone();
    let mut logits = Matrix::zeros(features.rows(), shapes.output_width());
    for (li, block) in blocks.iter().enumerate() {
        let mut z = dense(&current, block, params.values());
        if li + 1 < blocks.len() {
            for v in z.as_mut_slice() {
                *v = v.max(0.0);
            }
            layers.push(std::mem::replace(&mut current, z));
        } else {
            layers.push(std::mem::replace(&mut current, Matrix::zeros(0, 0)));
            logits = z;
        }
    }
    Ok((Activations { layers }, logits))
}

/// Class probabilities: ReLU hidden layers, softmax output.
pub fn forward(params: &ParamVector, features: &Matrix) -> Result<Matrix> {
    let (_, mut logits) = run_forward(params, features)?;
    for r in 0..logits.rows() {
        softmax_in_place(logits.row_mut(r));
    }
    Ok(logits)
}

/// Most probable class per row.
pub fn predict(params: &ParamVector, features: &Matrix) -> Result<Vec<usize>> {
    let (_, logits) = run_forward(params, features)?;
    Ok((0..logits.rows())
        .map(|r| argmax(logits.row(r)))
        .collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of the true class.
pub fn xent_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(NnError::DimensionMismatch {
            expected: probs.rows(),
            actual: labels.len(),
        });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= probs.cols() {
            return Err(NnError::LabelOutOfRange {
                label,
                classes: probs.cols(),
            });
        }
        total -= probs.row(r)[label].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Analytic gradient of the mean cross-entropy over `batch`, and the loss.
pub fn backward(params: &ParamVector, batch: &Batch) -> Result<(Gradient, f64)> {
    let shapes = params.shapes();
    let classes = shapes.output_width();
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    let n = batch.len();
    let mut grad = Gradient::zeros(params.len());
    if n == 0 {
        return Ok((grad, 0.0));
    }
    let (acts, logits) = run_forward(params, &batch.features)?;
    let inv_n = 1.0 / n as f64;

    // dL/dz for the output layer: (softmax - onehot) / n.
    let mut delta = logits;
    let mut loss = 0.0;
    for (r, &label) in batch.labels.iter().enumerate() {
        let row = delta.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - row[label];
        for v in row.iter_mut() {
            *v = (*v - log_sum).exp() * inv_n;
        }
        row[label] -= inv_n;
    }
    loss *= inv_n;

    let blocks = shapes.layers();
    for (li, block) in blocks.iter().enumerate().rev() {
        let input = &acts.layers[li];
        let weights = block.weights(params.values());
        {
            let (gw, gb) = grad.values[block.weight_offset..block.bias_offset + block.fan_out]
                .split_at_mut(block.fan_in * block.fan_out);
            for r in 0..n {
                let d = delta.row(r);
                for (g, &dv) in gb.iter_mut().zip(d) {
                    *g += dv;
                }
                for (i, &a) in input.row(r).iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let g_row = &mut gw[i * block.fan_out..(i + 1) * block.fan_out];
                    for (g, &dv) in g_row.iter_mut().zip(d) {
                        *g += a * dv;
                    }
                }
            }
        }
        if li == 0 {
            break;
        }
        let mut prev = Matrix::zeros(n, block.fan_in);
        for r in 0..n {
            let d = delta.row(r);
            let a_row = input.row(r);
            let p = prev.row_mut(r);
            for i in 0..block.fan_in {
                // ReLU derivative: zero where the activation was clamped.
                if a_row[i] <= 0.0 {
                    continue;
                }
                let w_row = &weights[i * block.fan_out..(i + 1) * block.fan_out];
                p[i] = w_row.iter().zip(d).map(|(w, dv)| w * dv).sum();
            }
        }
        delta = prev;
    }
    Ok((grad, loss))
}

/// Per-coordinate adaptive step sizes from accumulated squared gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdagradState {
    pub accumulator: Vec<f64>,
    pub learning_rate: f64,
    pub stability: f64,
}

impl AdagradState {
    pub fn new(len: usize, learning_rate: f64, stability: f64) -> Self {
        Self {
            accumulator: vec![0.0; len],
            learning_rate,
            stability,
        }
    }
}

/// One Adagrad update; mutates both the parameters and the accumulator.
pub fn adagrad_step(params: &mut ParamVector, state: &mut AdagradState, grad: &Gradient) -> Result<()> {
    if grad.len() != params.len() || state.accumulator.len() != params.len() {
        return Err(NnError::LayoutMismatch);
    }
    for ((w, acc), &g) in params
        .values
        .iter_mut()
        .zip(state.accumulator.iter_mut())
        .zip(&grad.values)
    {
        if g == 0.0 {
            continue;
        }
        *acc += g * g;
        *w -= state.learning_rate * g / (*acc + state.stability).sqrt();
    }
    Ok(())
}

/// Plain gradient descent step `w <- w - lr * g`.
pub fn sgd_step(params: &mut ParamVector, learning_rate: f64, grad: &Gradient) -> Result<()> {
    params.add_scaled_in_place(&grad.values, -learning_rate)
}

/// Local optimizer used inside client updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Adagrad { learning_rate: f64, stability: f64 },
    Sgd { learning_rate: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adagrad {
            learning_rate: 0.1,
            stability: DEFAULT_ADAGRAD_STABILITY,
        }
    }
}

impl OptimizerConfig {
    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Adagrad { learning_rate, .. } | OptimizerConfig::Sgd { learning_rate } => {
                learning_rate
            }
        }
    }
}

/// An optimizer instance with its running state.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adagrad(AdagradState),
    Sgd { learning_rate: f64 },
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, len: usize) -> Self {
        match *config {
            OptimizerConfig::Adagrad {
                learning_rate,
                stability,
            } => Optimizer::Adagrad(AdagradState::new(len, learning_rate, stability)),
            OptimizerConfig::Sgd { learning_rate } => Optimizer::Sgd { learning_rate },
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &Gradient) -> Result<()> {
        match self {
            Optimizer::Adagrad(state) => adagrad_step(params, state, grad),
            Optimizer::Sgd { learning_rate } => sgd_step(params, *learning_rate, grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_shapes() -> LayerShapes {
        LayerShapes::new(vec![2, 2, 2]).unwrap()
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(LayerShapes::new(vec![3]).is_err());
        assert!(LayerShapes::new(vec![3, 0, 2]).is_err());
    }

    #[test]
    fn paper_network_has_17721_parameters() {
        assert_eq!(LayerShapes::paper_default().param_count(), 17_721);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let shapes = LayerShapes::new(vec![2, 2]).unwrap();
        let a = init_params(&shapes, 42);
        let b = init_params(&shapes, 42);
        assert_eq!(a, b);
        assert_eq!(&a.values()[4..6], &[0.0, 0.0]);
        let paper = init_params(&LayerShapes::paper_default(), 7);
        let limit = (6.0f64 / 158.0).sqrt();
        assert!(paper.values()[..79 * 79].iter().all(|w| w.abs() <= limit));
        assert_ne!(init_params(&shapes, 43), a);
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let shapes = LayerShapes::paper_default();
        let params = ParamVector::zeros(&shapes);
        let x = Matrix::from_vec(2, 79, (0..158).map(|i| i as f64 * 0.1).collect()).unwrap();
        let p = forward(&params, &x).unwrap();
        for r in 0..2 {
            for &v in p.row(r) {
                assert!((v - 1.0 / 9.0).abs() < 1e-15);
            }
        }
        let loss = xent_loss(&p, &[0, 5]).unwrap();
        assert!((loss - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        // x=(1,-1); W1=[[1,2],[3,-1]] b1=(0.5,0) ; h = relu(1-3+0.5, 2+1) = (0, 3)
        // W2=[[1,0],[0.5,-0.5]] b2=(0,0.25); z = (1.5, -1.25)
        let shapes = tiny_shapes();
        let params = ParamVector::from_values(
            &shapes,
            vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0, 1.0, 0.0, 0.5, -0.5, 0.0, 0.25],
        )
        .unwrap();
        let x = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let p = forward(&params, &x).unwrap();
        let e0 = 1.5f64.exp();
        let e1 = (-1.25f64).exp();
        assert!((p.row(0)[0] - e0 / (e0 + e1)).abs() < 1e-15);
        assert!((p.row(0)[1] - e1 / (e0 + e1)).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = ParamVector::zeros(&tiny_shapes());
        let x = Matrix::zeros(1, 3);
        assert!(matches!(
            forward(&params, &x),
            Err(NnError::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn xent_examples() {
        let p = Matrix::from_vec(2, 2, vec![0.8, 0.2, 0.3, 0.7]).unwrap();
        let loss = xent_loss(&p, &[0, 1]).unwrap();
        assert!((loss - 0.289_909_1).abs() < 1e-6);
        assert!((loss - (-(0.8f64.ln()) - 0.7f64.ln()) / 2.0).abs() < 1e-15);
        let sure = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(xent_loss(&sure, &[0]).unwrap(), 0.0);
        assert!(matches!(
            xent_loss(&sure, &[2]),
            Err(NnError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        // One output bias only: 1-input, 1-output net has w and b. With a
        // single class every prediction is certain so the gradient vanishes.
        let shapes = LayerShapes::new(vec![1, 1]).unwrap();
        let params = ParamVector::from_values(&shapes, vec![0.3, -0.2]).unwrap();
        let batch = Batch::new(Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap(), vec![0, 0]).unwrap();
        let (g, loss) = backward(&params, &batch).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn duplicated_rows_leave_gradient_unchanged() {
        let shapes = LayerShapes::new(vec![3, 4, 3]).unwrap();
        let params = init_params(&shapes, 9);
        let rows = vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.2, -0.3]];
        let single = Batch::new(Matrix::from_rows(&rows).unwrap(), vec![0, 2]).unwrap();
        let doubled_rows: Vec<_> = rows.iter().chain(rows.iter()).cloned().collect();
        let doubled = Batch::new(Matrix::from_rows(&doubled_rows).unwrap(), vec![0, 2, 0, 2]).unwrap();
        let (g1, l1) = backward(&params, &single).unwrap();
        let (g2, l2) = backward(&params, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn adagrad_first_step_moves_by_learning_rate() {
        let shapes = LayerShapes::new(vec![1, 1]).unwrap();
        let mut params = ParamVector::zeros(&shapes);
        let mut state = AdagradState::new(2, 0.1, 0.0);
        adagrad_step(&mut params, &mut state, &Gradient { values: vec![3.0, 0.0] }).unwrap();
        assert!((params.values()[0] + 0.1).abs() < 1e-15);
        assert_eq!(params.values()[1], 0.0);
        assert_eq!(state.accumulator, vec![9.0, 0.0]);
    }

    #[test]
    fn adagrad_second_step_shrinks() {
        let shapes = LayerShapes::new(vec![1, 1]).unwrap();
        let mut params = ParamVector::zeros(&shapes);
        let mut state = AdagradState::new(2, 0.1, 0.0);
        let g = Gradient { values: vec![1.0, 1.0] };
        adagrad_step(&mut params, &mut state, &g).unwrap();
        let before = params.values()[0];
        adagrad_step(&mut params, &mut state, &g).unwrap();
        let step = before - params.values()[0];
        assert!((step - 0.1 / 2f64.sqrt()).abs() < 1e-12);
        assert!((step - 0.070_71).abs() < 1e-5);
    }

    #[test]
    fn vector_arithmetic() {
        let shapes = LayerShapes::new(vec![1, 1]).unwrap();
        let zero = ParamVector::zeros(&shapes);
        assert_eq!(zero.l2_norm(), 0.0);
        let a = ParamVector::from_values(&shapes, vec![3.0, 4.0]).unwrap();
        assert_eq!(a.l2_norm(), 5.0);
        assert!(a.add_scaled(&a, -1.0).unwrap().is_zero());
        let other = ParamVector::zeros(&LayerShapes::new(vec![2, 1]).unwrap());
        assert_eq!(a.add_scaled(&other, 1.0), Err(NnError::LayoutMismatch));
    }
}
