//! Small feed-forward feature extractor with manually derived gradients,
//! plus a growable linear classifier head.
//!
//! The backbone is a chain of affine layers with ReLU on the hidden layers
//! and a linear feature output. The head is bias-free, so logits are exactly
//! `features * W` with `W` of shape `feature_dim x num_classes`; columns are
//! appended as tasks arrive and earlier columns are never touched by the
//! expansion.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{Optimizer, OptimizerKind};

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;
use rand::Rng as _;

/// One affine layer, `output = input * weight + bias`, with an optional ReLU.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    /// `in_dim x out_dim`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl AffineLayer {
    fn new(in_dim: usize, out_dim: usize, relu: bool, rng: &mut crate::Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Matrix::from_fn(in_dim, out_dim, |_, _| rng.gen_range(-bound..bound));
        AffineLayer { weight, bias: vec![0.0; out_dim], relu }
    }
}

/// Feature extraction backbone `f(x; theta)`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub layers: Vec<AffineLayer>,
    input_dim: usize,
    feature_dim: usize,
}

impl FeatureExtractor {
    /// Builds an MLP `input -> hidden[0] -> ... -> feature_dim`, hidden
    /// layers ReLU, feature layer linear. Weights are uniform in
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn new(input_dim: usize, hidden: &[usize], feature_dim: usize, rng: &mut crate::Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(AffineLayer::new(prev, h, true, rng));
            prev = h;
        }
        layers.push(AffineLayer::new(prev, feature_dim, false, rng));
        FeatureExtractor { layers, input_dim, feature_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.cols())
            .collect()
    }

    /// Forward pass through the backbone only. Keeps per-layer inputs and
    /// pre-activations for the backward pass.
    pub fn forward_features(&self, batch: &Matrix) -> Result<BackboneCache> {
        if batch.cols() != self.input_dim {
            return Err(CoreError::Dimension(format!(
                "input has width {}, extractor expects {}",
                batch.cols(),
                self.input_dim
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for layer in &self.layers {
            layer_inputs.push(current.clone());
            let mut pre = current.matmul(&layer.weight);
            for r in 0..pre.rows() {
                let row = pre.row_mut(r);
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            pre_activations.push(pre.clone());
            if layer.relu {
                for v in pre.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            current = pre;
        }
        Ok(BackboneCache { layer_inputs, pre_activations, features: current })
    }

    /// Flat views over all parameter tensors, layer weights then biases.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().sum()
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot { extractor: self.clone() }
    }
}

/// Frozen copy of backbone parameters from a completed task.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    extractor: FeatureExtractor,
}

impl ModelSnapshot {
    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }
}

/// Intermediate state of a backbone forward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    layer_inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    pub features: Matrix,
}

/// Forward state for backbone plus head.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub backbone: BackboneCache,
    pub logits: Matrix,
}

impl ForwardCache {
    pub fn features(&self) -> &Matrix {
        &self.backbone.features
    }
}

/// Growable linear classification head. Column `j` scores the class stored
/// in `classes[j]`; task ranges partition the columns in arrival order.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    /// `feature_dim x num_classes`.
    pub weights: Matrix,
    ranges: Vec<(usize, usize)>,
    classes: Vec<usize>,
}

impl ClassifierHead {
    pub fn new(feature_dim: usize) -> Self {
        ClassifierHead { weights: Matrix::zeros(feature_dim, 0), ranges: Vec::new(), classes: Vec::new() }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    /// `(start, count)` column ranges, one per task, partitioning `[0, m)`.
    pub fn task_ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    /// Column range of the most recently added task.
    pub fn active_range(&self) -> Option<std::ops::Range<usize>> {
        self.ranges.last().map(|&(s, c)| s..s + c)
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn column_of_class(&self, class_id: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id)
    }

    pub fn class_of_column(&self, col: usize) -> usize {
        self.classes[col]
    }

    /// Logits for a feature batch: `features * W`.
    pub fn logits(&self, features: &Matrix) -> Matrix {
        features.matmul(&self.weights)
    }

    /// Logits restricted to the given column range.
    pub fn logits_in(&self, features: &Matrix, cols: std::ops::Range<usize>) -> Matrix {
        let mut out = Matrix::zeros(features.rows(), cols.len());
        for r in 0..features.rows() {
            let f = features.row(r);
            for (jo, j) in cols.clone().enumerate() {
                let mut s = 0.0;
                for (i, &fi) in f.iter().enumerate() {
                    s += fi * self.weights.get(i, j);
                }
                out.set(r, jo, s);
            }
        }
        out
    }
}

/// Returns a head extended with one column per new class. Existing columns
/// are copied bit-exactly; new columns are uniform in `(-1/sqrt(n), 1/sqrt(n))`.
pub fn expand_head(head: &ClassifierHead, new_classes: &[usize], rng: &mut crate::Rng) -> ClassifierHead {
    let n = head.feature_dim();
    let old_m = head.num_classes();
    let add = new_classes.len();
    let bound = 1.0 / (n as f64).sqrt();
    let mut weights = Matrix::zeros(n, old_m + add);
    for i in 0..n {
        for j in 0..old_m {
            weights.set(i, j, head.weights.get(i, j));
        }
    }
    for j in old_m..old_m + add {
        for i in 0..n {
            weights.set(i, j, rng.gen_range(-bound..bound));
        }
    }
    let mut ranges = head.ranges.clone();
    ranges.push((old_m, add));
    let mut classes = head.classes.clone();
    classes.extend_from_slice(new_classes);
    ClassifierHead { weights, ranges, classes }
}

/// Full forward pass: backbone features and head logits.
pub fn forward(extractor: &FeatureExtractor, head: &ClassifierHead, batch: &Matrix) -> Result<ForwardCache> {
    if head.feature_dim() != extractor.feature_dim() {
        return Err(CoreError::Dimension(format!(
            "head expects {} features, extractor produces {}",
            head.feature_dim(),
            extractor.feature_dim()
        )));
    }
    let backbone = extractor.forward_features(batch)?;
    let logits = head.logits(&backbone.features);
    Ok(ForwardCache { backbone, logits })
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        let o = out.row_mut(r);
        for (dst, &z) in o.iter_mut().zip(row) {
            *dst = (z - lse).exp();
        }
    }
    out
}

/// Mean cross-entropy over the batch, with the softmax restricted to
/// `active` columns. Labels are global column indices and must fall inside
/// the active range. The returned gradient is with respect to the full logit
/// matrix and is exactly zero outside the active columns.
pub fn softmax_cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    active: std::ops::Range<usize>,
) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(CoreError::Dimension(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if active.end > logits.cols() || active.is_empty() {
        return Err(CoreError::Dimension(format!(
            "active columns {active:?} out of bounds for {} classes",
            logits.cols()
        )));
    }
    let batch = logits.rows() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for r in 0..logits.rows() {
        let label = labels[r];
        if label < active.start || label >= active.end {
            return Err(CoreError::LabelOutOfRange { label, start: active.start, end: active.end });
        }
        let row = &logits.row(r)[active.clone()];
        let lse = log_sum_exp(row);
        loss += lse - logits.get(r, label);
        let d = dlogits.row_mut(r);
        for (jo, j) in active.clone().enumerate() {
            let p = (row[jo] - lse).exp();
            let target = if j == label { 1.0 } else { 0.0 };
            d[j] = (p - target) / batch;
        }
    }
    Ok((loss / batch, dlogits))
}

/// Gradients for every backbone parameter, in `param_slices` order semantics
/// (per layer: weight matrix then bias vector).
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(extractor: &FeatureExtractor) -> Self {
        ParamGrads {
            layers: extractor
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.weight.rows(), l.weight.cols()), vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_scaled(ow, scale);
            for (x, y) in b.iter_mut().zip(ob) {
                *x += scale * y;
            }
        }
    }

    /// Flat views matching `FeatureExtractor::param_slices` ordering.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (w, b) in &self.layers {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.max_abs().max(b.iter().fold(0.0f64, |a, v| a.max(v.abs()))))
            .fold(0.0, f64::max)
    }
}

/// Backpropagates a feature-space gradient through the backbone.
///
/// `dfeatures` is `batch x feature_dim` and may combine several loss paths
/// (classification plus regularization) by summation before the call.
pub fn backward(
    extractor: &FeatureExtractor,
    cache: &BackboneCache,
    dfeatures: &Matrix,
) -> Result<ParamGrads> {
    if dfeatures.rows() != cache.features.rows() || dfeatures.cols() != cache.features.cols() {
        return Err(CoreError::Dimension(format!(
            "dfeatures is {}x{}, cache features are {}x{}",
            dfeatures.rows(),
            dfeatures.cols(),
            cache.features.rows(),
            cache.features.cols()
        )));
    }
    if cache.layer_inputs.len() != extractor.layers.len() {
        return Err(CoreError::Dimension("cache does not match extractor depth".into()));
    }
    let mut grads = ParamGrads::zeros_like(extractor);
    let mut dpost = dfeatures.clone();
    for (idx, layer) in extractor.layers.iter().enumerate().rev() {
        let pre = &cache.pre_activations[idx];
        let input = &cache.layer_inputs[idx];
        let mut dpre = dpost;
        if layer.relu {
            for r in 0..dpre.rows() {
                let prow = pre.row(r);
                let drow = dpre.row_mut(r);
                for (d, &p) in drow.iter_mut().zip(prow) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        let dw = input.transpose().matmul(&dpre);
        let mut db = vec![0.0; layer.bias.len()];
        for r in 0..dpre.rows() {
            for (b, &d) in db.iter_mut().zip(dpre.row(r)) {
                *b += d;
            }
        }
        grads.layers[idx] = (dw, db);
        if idx > 0 {
            dpost = dpre.matmul(&layer.weight.transpose());
        } else {
            dpost = dpre; // unused, keeps the borrow checker simple
        }
    }
    Ok(grads)
}

/// Head weight gradient `features^T * dlogits`.
pub fn head_gradient(features: &Matrix, dlogits: &Matrix) -> Matrix {
    features.transpose().matmul(dlogits)
}

/// Feature-space gradient induced by a logit gradient: `dlogits * W^T`.
pub fn feature_gradient_from_logits(head: &ClassifierHead, dlogits: &Matrix) -> Matrix {
    dlogits.matmul(&head.weights.transpose())
}
