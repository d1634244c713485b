//! Regularized binary logistic probes.
//!
//! The objective is the mean negative log-likelihood over the batch plus
//! `lambda2 * ||theta||^2` plus `lambda1 * ||theta||_1`. The smooth part is
//! minimized by mini-batch SGD; the L1 part is applied after every step as
//! a soft-threshold (proximal operator), which yields exact zeros.
//!
//! `lambda2 = 0` is the Lasso probe, `lambda1 = 0` the Ridge probe and both
//! non-zero the ElasticNet (LCA) probe. With both zero the probe is the
//! unregularized evaluation classifier.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept::{ConceptDataset, ConceptError, Split, Standardizer};
use crate::rng;
use crate::store::ActivationMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no neurons selected")]
    EmptySelection,
    #[error("neuron {neuron} out of range for {neurons} neurons")]
    NeuronOutOfRange { neuron: usize, neurons: usize },
    #[error("no rows to evaluate")]
    EmptyRows,
    #[error(transparent)]
    Concept(#[from] ConceptError),
}

impl ProbeError {
    pub fn kind(&self) -> &'static str {
        match self {
            ProbeError::Diverged { .. } => "Diverged",
            ProbeError::InvalidConfig(_) => "InvalidConfig",
            ProbeError::EmptySelection => "EmptySelection",
            ProbeError::NeuronOutOfRange { .. } => "NeuronOutOfRange",
            ProbeError::EmptyRows => "EmptyRows",
            ProbeError::Concept(e) => e.kind(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.01,
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lasso() -> Self {
        Self {
            lambda2: 0.0,
            ..Self::default()
        }
    }

    pub fn ridge() -> Self {
        Self {
            lambda1: 0.0,
            ..Self::default()
        }
    }

    pub fn elastic_net() -> Self {
        Self::default()
    }

    pub fn unregularized() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::InvalidConfig(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1 must be finite and >= 0");
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad("lambda2 must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// One weight per entry of `columns`.
    pub theta: Vec<f64>,
    pub bias: f64,
    pub config: TrainConfig,
    /// Neuron ids the weights refer to.
    pub columns: Vec<usize>,
    pub standardizer: Standardizer,
    pub final_train_loss: f64,
    pub dev_accuracy: f64,
    /// Full training objective after each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_theta: Vec<f64>,
    pub grad_bias: f64,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smooth part of the objective on one batch and its exact gradient.
///
/// `x` is row-major with `theta.len()` columns; labels are 0 or 1.
pub fn loss_and_gradient(theta: &[f64], bias: f64, x: &[f64], labels: &[u8], lambda2: f64) -> LossGrad {
    let dim = theta.len();
    let n = labels.len();
    debug_assert!(n > 0 && x.len() == n * dim);
    let mut loss = 0.0;
    let mut grad_theta = vec![0.0; dim];
    let mut grad_bias = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &x[i * dim..(i + 1) * dim];
        let z = dot(theta, row) + bias;
        loss += if y == 1 { softplus(-z) } else { softplus(z) };
        let r = sigmoid(z) - y as f64;
        for (g, &v) in grad_theta.iter_mut().zip(row) {
            *g += r * v;
        }
        grad_bias += r;
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    grad_bias *= inv;
    for (g, &t) in grad_theta.iter_mut().zip(theta) {
        *g = *g * inv + 2.0 * lambda2 * t;
    }
    loss += lambda2 * dot(theta, theta);
    LossGrad {
        loss,
        grad_theta,
        grad_bias,
    }
}

/// `sign(v) * max(|v| - threshold, 0)`.
#[inline]
fn soft_threshold(v: f64, threshold: f64) -> f64 {
    if v > threshold {
        v - threshold
    } else if v < -threshold {
        v + threshold
    } else {
        0.0
    }
}

fn objective(theta: &[f64], bias: f64, x: &[f64], labels: &[u8], config: &TrainConfig) -> f64 {
    let smooth = loss_and_gradient(theta, bias, x, labels, config.lambda2).loss;
    smooth + config.lambda1 * theta.iter().map(|t| t.abs()).sum::<f64>()
}

struct Fit {
    theta: Vec<f64>,
    bias: f64,
    epoch_losses: Vec<f64>,
}

/// Proximal mini-batch SGD on a row-major design matrix.
fn fit_logistic(x: &[f64], labels: &[u8], dim: usize, config: &TrainConfig) -> Result<Fit, ProbeError> {
    let n = labels.len();
    let mut theta = vec![0.0; dim];
    let mut bias = 0.0;
    let mut rng = rng::seeded(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_x = Vec::with_capacity(config.batch_size.min(n) * dim);
    let mut batch_y = Vec::with_capacity(config.batch_size.min(n));
    let threshold = config.learning_rate * config.lambda1;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(&x[i * dim..(i + 1) * dim]);
                batch_y.push(labels[i]);
            }
            let lg = loss_and_gradient(&theta, bias, &batch_x, &batch_y, config.lambda2);
            if !lg.loss.is_finite() {
                return Err(ProbeError::Diverged { epoch, batch: b });
            }
            for (t, g) in theta.iter_mut().zip(&lg.grad_theta) {
                *t = soft_threshold(*t - config.learning_rate * g, threshold);
            }
            bias -= config.learning_rate * lg.grad_bias;
        }
        let loss = objective(&theta, bias, x, labels, config);
        if !loss.is_finite() {
            return Err(ProbeError::Diverged {
                epoch,
                batch: n.div_ceil(config.batch_size),
            });
        }
        epoch_losses.push(loss);
    }
    Ok(Fit {
        theta,
        bias,
        epoch_losses,
    })
}

fn accuracy_on(theta: &[f64], bias: f64, x: &[f64], labels: &[u8]) -> f64 {
    let dim = theta.len();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let z = dot(theta, &x[i * dim..(i + 1) * dim]) + bias;
            // sigma(z) > 0.5 iff z > 0; z == 0 predicts class 0
            (z > 0.0) as u8 == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Trains a probe on every neuron of the layer.
pub fn train_probe(
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
    config: &TrainConfig,
) -> Result<ProbeModel, ProbeError> {
    let columns: Vec<usize> = (0..matrix.neurons()).collect();
    train_probe_on(matrix, dataset, &columns, config)
}

/// Trains a probe restricted to `columns`, on z-scored train activations.
pub fn train_probe_on(
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
    columns: &[usize],
    config: &TrainConfig,
) -> Result<ProbeModel, ProbeError> {
    config.validate()?;
    if columns.is_empty() {
        return Err(ProbeError::EmptySelection);
    }
    if let Some(&neuron) = columns.iter().find(|&&c| c >= matrix.neurons()) {
        return Err(ProbeError::NeuronOutOfRange {
            neuron,
            neurons: matrix.neurons(),
        });
    }
    let (train_rows, train_y) = dataset.split_rows(Split::Train);
    let standardizer = Standardizer::fit_rows(matrix, &train_rows)?;
    let x = standardizer.design(matrix, &train_rows, columns);
    let fit = fit_logistic(&x, &train_y, columns.len(), config)?;

    let (dev_rows, dev_y) = dataset.split_rows(Split::Dev);
    let dev_accuracy = if dev_rows.is_empty() {
        f64::NAN
    } else {
        let dx = standardizer.design(matrix, &dev_rows, columns);
        accuracy_on(&fit.theta, fit.bias, &dx, &dev_y)
    };
    Ok(ProbeModel {
        final_train_loss: *fit.epoch_losses.last().expect("epochs > 0"),
        theta: fit.theta,
        bias: fit.bias,
        config: config.clone(),
        columns: columns.to_vec(),
        standardizer,
        dev_accuracy,
        epoch_losses: fit.epoch_losses,
    })
}

/// Fraction of `rows` whose thresholded prediction equals the label.
pub fn evaluate_probe(
    model: &ProbeModel,
    matrix: &ActivationMatrix,
    rows: &[usize],
    labels: &[u8],
) -> Result<f64, ProbeError> {
    if rows.is_empty() {
        return Err(ProbeError::EmptyRows);
    }
    let x = model.standardizer.design(matrix, rows, &model.columns);
    Ok(accuracy_on(&model.theta, model.bias, &x, labels))
}

/// Trains an unregularized classifier on `selected` neurons and returns its
/// test-split accuracy.
pub fn train_eval_classifier(
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
    selected: &[usize],
) -> Result<f64, ProbeError> {
    train_eval_classifier_with(matrix, dataset, selected, &TrainConfig::unregularized().with_seed(dataset.seed))
}

pub fn train_eval_classifier_with(
    matrix: &ActivationMatrix,
    dataset: &ConceptDataset,
    selected: &[usize],
    config: &TrainConfig,
) -> Result<f64, ProbeError> {
    // the feature set is unordered; fixing column order makes equal sets train identically
    let mut columns = selected.to_vec();
    columns.sort_unstable();
    let model = train_probe_on(matrix, dataset, &columns, config)?;
    let (rows, labels) = dataset.split_rows(Split::Test);
    evaluate_probe(&model, matrix, &rows, &labels)
}
